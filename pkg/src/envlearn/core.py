"""Shared data model: datasets with per-sample metadata, binary environment
partitions, deterministic seed derivation, and the canonical on-disk format.

Values are immutable after construction and safe to share across workers.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, InitVar

import numpy as np

from .errors import DimensionMismatch, EmptySubset, MissingMetadata

TASKS = ("regression", "binary", "multiclass")
META_FIELDS = ("env_id", "spurious_id", "causal_id", "is_shuffled")

FORMAT_NAME = "envlearn-dataset"
FORMAT_VERSION = 1


def rng_from(seed: int, *labels) -> np.random.Generator:
    """Deterministic generator for (seed, label path).

    Labels (strings or ints) name independent streams, so adding a consumer
    never shifts the randomness seen by existing ones.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for lab in labels:
        if isinstance(lab, str):
            entropy.append(zlib.crc32(lab.encode("utf-8")))
        else:
            entropy.append(int(lab) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Feature matrix + labels + optional per-sample ground-truth metadata.

    features: (n, d) float32/float64
    labels: (n,) float64 for regression, int64 class indices otherwise
    task: "regression" | "binary" | "multiclass"
    n_classes: 0 for regression, 2 for binary, K for multiclass
    meta columns (all optional, (n,) each): env_id, spurious_id, causal_id
    int64; is_shuffled bool.

    Empty (n == 0) datasets appear only as the degenerate side of a split;
    direct construction requires n > 0.
    """

    features: np.ndarray
    labels: np.ndarray
    task: str
    n_classes: int = 0
    env_id: np.ndarray | None = None
    spurious_id: np.ndarray | None = None
    causal_id: np.ndarray | None = None
    is_shuffled: np.ndarray | None = None
    allow_empty: InitVar[bool] = False

    def __post_init__(self, allow_empty: bool):
        feats = np.asarray(self.features)
        if feats.dtype != np.float32:
            feats = feats.astype(np.float64, copy=False)
        if feats.ndim != 2:
            raise DimensionMismatch(f"features must be 2-D, got shape {feats.shape}")
        object.__setattr__(self, "features", _freeze(feats))
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        ldtype = np.float64 if self.task == "regression" else np.int64
        labels = _freeze(np.asarray(self.labels, dtype=ldtype).reshape(-1))
        object.__setattr__(self, "labels", labels)
        for name in META_FIELDS:
            col = getattr(self, name)
            if col is None:
                continue
            dtype = bool if name == "is_shuffled" else np.int64
            object.__setattr__(self, name, _freeze(np.asarray(col, dtype=dtype).reshape(-1)))

        n, d = self.features.shape
        if d <= 0:
            raise DimensionMismatch("feature dimension must be positive")
        if n == 0 and not allow_empty:
            raise EmptySubset("dataset has no rows")
        if len(self.labels) != n:
            raise DimensionMismatch(f"{len(self.labels)} labels for {n} rows")
        for name in META_FIELDS:
            col = getattr(self, name)
            if col is not None and len(col) != n:
                raise DimensionMismatch(f"meta column {name} has length {len(col)}, expected {n}")
        if self.task == "binary" and self.n_classes == 0:
            object.__setattr__(self, "n_classes", 2)
        if self.task == "multiclass" and self.n_classes < 2:
            raise ValueError("multiclass task needs n_classes >= 2")
        if self.task != "regression" and n > 0:
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise ValueError("class index out of range")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def meta_fields(self) -> tuple[str, ...]:
        return tuple(f for f in META_FIELDS if getattr(self, f) is not None)

    def require_meta(self, *names: str) -> None:
        missing = [f for f in names if getattr(self, f) is None]
        if missing:
            raise MissingMetadata(f"dataset lacks metadata: {', '.join(missing)}")


@dataclass(frozen=True)
class EnvPartition:
    """Soft assignment to environment 1 and the hardened binary labels.

    hard[i] = 1 iff soft_q[i] > 0.5; q = 0.5 goes to environment 0.
    """

    soft_q: np.ndarray
    hard: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        q = _freeze(np.asarray(self.soft_q, dtype=np.float64).reshape(-1))
        if q.size and (q.min() < 0.0 or q.max() > 1.0):
            raise ValueError("soft assignments must lie in [0, 1]")
        object.__setattr__(self, "soft_q", q)
        hard = _freeze((q > 0.5).astype(np.int64))
        if self.hard is not None and not np.array_equal(np.asarray(self.hard, dtype=np.int64).reshape(-1), hard):
            raise ValueError("hard labels disagree with the 0.5 threshold on soft_q")
        object.__setattr__(self, "hard", hard)

    @property
    def n(self) -> int:
        return self.soft_q.shape[0]

    def sizes(self) -> tuple[int, int]:
        n1 = int(self.hard.sum())
        return self.n - n1, n1


def subset(data: Dataset, mask: np.ndarray) -> Dataset:
    """Rows of `data` where mask is true, order preserved, metadata carried."""
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != data.n:
        raise DimensionMismatch(f"mask length {mask.shape[0]} != {data.n} rows")
    if not mask.any():
        raise EmptySubset("mask selects no rows")
    return _take(data, np.flatnonzero(mask), allow_empty=False)


def _take(data: Dataset, idx: np.ndarray, allow_empty: bool) -> Dataset:
    kw = {f: (getattr(data, f)[idx] if getattr(data, f) is not None else None) for f in META_FIELDS}
    return Dataset(
        features=data.features[idx],
        labels=data.labels[idx],
        task=data.task,
        n_classes=data.n_classes,
        allow_empty=allow_empty,
        **kw,
    )


def split_by_partition(data: Dataset, p: EnvPartition) -> tuple[Dataset, Dataset]:
    """Split into (environment 0, environment 1); an empty side is allowed and
    returned as a zero-row dataset rather than raising."""
    if p.n != data.n:
        raise DimensionMismatch(f"partition sized {p.n} for {data.n} rows")
    env0 = _take(data, np.flatnonzero(p.hard == 0), allow_empty=True)
    env1 = _take(data, np.flatnonzero(p.hard == 1), allow_empty=True)
    return env0, env1


def concat_datasets(parts: list[Dataset]) -> Dataset:
    """Stack datasets row-wise. Metadata is kept only for columns present in
    every part; mixed presence raises rather than silently dropping."""
    if not parts:
        raise EmptySubset("nothing to concatenate")
    first = parts[0]
    for d in parts[1:]:
        if d.task != first.task or d.n_classes != first.n_classes:
            raise DimensionMismatch("cannot concatenate datasets with different tasks")
        if d.dim != first.dim:
            raise DimensionMismatch("cannot concatenate datasets with different feature dims")
        if d.meta_fields() != first.meta_fields():
            raise MissingMetadata("cannot concatenate datasets with different metadata columns")
    kw = {}
    for f in META_FIELDS:
        if getattr(first, f) is not None:
            kw[f] = np.concatenate([getattr(d, f) for d in parts])
    return Dataset(
        features=np.concatenate([d.features for d in parts], axis=0),
        labels=np.concatenate([d.labels for d in parts]),
        task=first.task,
        n_classes=first.n_classes,
        **kw,
    )


# On-disk format: one JSON header line, then little-endian binary columns —
# features as f32 rows, labels as f32 (regression) or i32, then each metadata
# column named in the header as i32 (is_shuffled stored 0/1).

def dataset_to_bytes(data: Dataset) -> bytes:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n": data.n,
        "d": data.dim,
        "task": data.task,
        "n_classes": data.n_classes,
        "meta": list(data.meta_fields()),
    }
    out = [json.dumps(header, sort_keys=True).encode("utf-8"), b"\n"]
    out.append(np.ascontiguousarray(data.features, dtype="<f4").tobytes())
    ldtype = "<f4" if data.task == "regression" else "<i4"
    out.append(np.ascontiguousarray(data.labels, dtype=ldtype).tobytes())
    for f in data.meta_fields():
        out.append(np.ascontiguousarray(getattr(data, f), dtype="<i4").tobytes())
    return b"".join(out)


def dataset_from_bytes(buf: bytes) -> Dataset:
    nl = buf.find(b"\n")
    if nl < 0:
        raise ValueError("missing header line")
    header = json.loads(buf[:nl].decode("utf-8"))
    if header.get("format") != FORMAT_NAME:
        raise ValueError("not an envlearn dataset file")
    n, d, task = header["n"], header["d"], header["task"]
    off = nl + 1

    def read(dtype, count):
        nonlocal off
        nbytes = np.dtype(dtype).itemsize * count
        if off + nbytes > len(buf):
            raise ValueError("payload shorter than header declares")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += nbytes
        return arr

    feats = read("<f4", n * d).reshape(n, d).astype(np.float64)
    labels = read("<f4" if task == "regression" else "<i4", n)
    kw = {}
    for f in header["meta"]:
        col = read("<i4", n)
        kw[f] = col.astype(bool) if f == "is_shuffled" else col
    if off != len(buf):
        raise ValueError("trailing bytes after declared payload")
    return Dataset(features=feats, labels=labels, task=task, n_classes=header["n_classes"], **kw)


def save_dataset(data: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(data))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
