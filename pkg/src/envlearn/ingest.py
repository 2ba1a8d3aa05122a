"""Bit-exact readers and writers for the MNIST IDX and CIFAR-10 binary formats.

Parsers work on byte buffers (callers pre-decompress), never read past
declared lengths, and keep pixel values as raw u8 — normalization to [0, 1]
happens only when a Dataset is built from them.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadLabel, BadMagic, BadStride, Truncated

# IDX header: two zero bytes, dtype byte, rank byte, then rank big-endian u32
# dims, then the payload. Only u8 payloads (dtype 0x08) of rank 1 or 3 are
# accepted — all MNIST files are one of those.
_IDX_DTYPE_U8 = 0x08

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixels (R, G, B planes)


@dataclass(frozen=True)
class IdxTensor:
    dims: tuple[int, ...]
    data: np.ndarray  # flat u8 buffer, len == prod(dims)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.uint8).reshape(-1)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "dims", tuple(int(x) for x in self.dims))
        n = 1
        for s in self.dims:
            n *= s
        if n != len(self.data):
            raise Truncated(f"dims {self.dims} declare {n} bytes, got {len(self.data)}")

    def as_array(self) -> np.ndarray:
        return self.data.reshape(self.dims)


def parse_idx(buf: bytes) -> IdxTensor:
    if len(buf) < 4:
        raise Truncated("buffer shorter than the 4-byte magic")
    zero, dtype, rank = buf[0] << 8 | buf[1], buf[2], buf[3]
    if zero != 0 or dtype != _IDX_DTYPE_U8 or rank not in (1, 3):
        raise BadMagic(f"unsupported magic {buf[:4].hex()} (want u8 rank 1 or 3)")
    head = 4 + 4 * rank
    if len(buf) < head:
        raise Truncated(f"header needs {head} bytes, buffer has {len(buf)}")
    dims = struct.unpack(f">{rank}I", buf[4:head])
    count = 1
    for s in dims:
        count *= s
    if len(buf) < head + count:
        raise Truncated(f"payload declares {count} bytes, {len(buf) - head} present")
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=head)
    return IdxTensor(dims=dims, data=data)


def write_idx(t: IdxTensor) -> bytes:
    rank = len(t.dims)
    if rank not in (1, 3):
        raise BadMagic(f"can only write rank 1 or 3, got {rank}")
    head = struct.pack(">HBB", 0, _IDX_DTYPE_U8, rank) + struct.pack(f">{rank}I", *t.dims)
    return head + t.data.tobytes()


@dataclass(frozen=True)
class Cifar10Record:
    label: int
    pixels: np.ndarray  # 3072 u8: three 32x32 row-major planes, R then G then B

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8).reshape(-1)
        if px.shape[0] != CIFAR_RECORD_BYTES - 1:
            raise BadStride(f"record needs {CIFAR_RECORD_BYTES - 1} pixel bytes, got {px.shape[0]}")
        if not 0 <= int(self.label) <= 9:
            raise BadLabel(f"label {self.label} outside 0..9")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "label", int(self.label))


def parse_cifar10(buf: bytes) -> list[Cifar10Record]:
    if len(buf) % CIFAR_RECORD_BYTES != 0:
        raise BadStride(f"{len(buf)} bytes is not a multiple of {CIFAR_RECORD_BYTES}")
    records = []
    arr = np.frombuffer(buf, dtype=np.uint8)
    for i in range(len(buf) // CIFAR_RECORD_BYTES):
        rec = arr[i * CIFAR_RECORD_BYTES:(i + 1) * CIFAR_RECORD_BYTES]
        label = int(rec[0])
        if label > 9:
            raise BadLabel(f"record {i} has label {label}")
        records.append(Cifar10Record(label=label, pixels=rec[1:]))
    return records


def write_cifar10(records: list[Cifar10Record]) -> bytes:
    out = bytearray()
    for rec in records:
        out.append(rec.label)
        out.extend(rec.pixels.tobytes())
    return bytes(out)


def images_from_idx(t: IdxTensor) -> np.ndarray:
    """(n, rows*cols) float64 in [0, 1] from a rank-3 image tensor."""
    if len(t.dims) != 3:
        raise BadMagic("image tensor must be rank 3")
    n = t.dims[0]
    return t.as_array().reshape(n, -1).astype(np.float64) / 255.0


def cifar_image_planes(rec: Cifar10Record) -> np.ndarray:
    """(3, 32, 32) float64 in [0, 1]."""
    return rec.pixels.reshape(3, 32, 32).astype(np.float64) / 255.0
