"""Synthetic benchmark generators.

Every generator is a pure function of (config, seed). All of them share one
causal story: a label is produced by causal features and then produces a
spurious feature whose mechanism differs between training environments and
breaks at test time. Ground-truth ids (spurious_id, causal_id, is_shuffled)
are recorded in dataset metadata so the information diagnostics can be
computed exactly instead of being estimated from raw pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, EnvPartition, concat_datasets, rng_from, split_by_partition

SEM_VARIANTS = tuple(a + b + c for a in "FP" for b in "OE" for c in "US")
SEM_TRAIN_NOISES = (0.2, 2.0)
SEM_VAL_NOISE = 3.5
SEM_TEST_NOISE = 5.0


@dataclass(frozen=True)
class SemGroundTruth:
    """True structural weights of a generated regression problem."""

    w_causal: np.ndarray  # (d,) X -> Y
    w_anticausal: np.ndarray  # (d,) Y -> Z
    scramble: np.ndarray  # (2d, 2d) orthogonal; identity for U variants
    variant: str

    @property
    def d(self) -> int:
        return self.w_causal.shape[0]


def _check_variant(variant: str) -> str:
    v = variant.upper()
    if v not in SEM_VARIANTS:
        raise ValueError(f"variant must be one of {SEM_VARIANTS}, got {variant!r}")
    return v


def gen_sem(variant: str, d: int = 10, n_per_env: int = 1000,
            env_noises=SEM_TRAIN_NOISES, seed: int = 0):
    """One regression dataset per noise level sigma.

    Per environment: X ~ N(0, sigma^2 I_d); Y = X w_c + eps_y;
    Z = Y w_a + eps_z. Homoskedastic (O): Var eps_y = sigma^2, Var eps_z = 1;
    heteroskedastic (E): Var eps_y = 1, Var eps_z = sigma^2. Partially
    observed (P) adds one hidden scalar h ~ N(0, sigma^2) to every observed
    coordinate of X and Z. Scrambled (S) multiplies [X; Z] by a fixed random
    orthogonal matrix. Features are 2d wide, X block first.
    """
    v = _check_variant(variant)
    rng = rng_from(seed, "sem-truth")
    w_c = rng.normal(size=d) / np.sqrt(d)
    w_a = rng.normal(size=d) / np.sqrt(d)
    if v[2] == "S":
        scramble, _ = np.linalg.qr(rng.normal(size=(2 * d, 2 * d)))
    else:
        scramble = np.eye(2 * d)
    datasets = []
    for i, sig in enumerate(env_noises):
        erng = rng_from(seed, "sem-env", i)
        X0 = erng.normal(0.0, sig, size=(n_per_env, d))
        eps_y = erng.normal(0.0, sig if v[1] == "O" else 1.0, size=n_per_env)
        Y = X0 @ w_c + eps_y
        eps_z = erng.normal(0.0, 1.0 if v[1] == "O" else sig, size=(n_per_env, d))
        Z0 = Y[:, None] * w_a[None, :] + eps_z
        if v[0] == "P":
            h = erng.normal(0.0, sig, size=(n_per_env, 1))
            X, Z = X0 + h, Z0 + h
        else:
            X, Z = X0, Z0
        feats = np.hstack([X, Z])
        if v[2] == "S":
            feats = feats @ scramble.T
        datasets.append(Dataset(features=feats, labels=Y, task="regression",
                                env_id=np.full(n_per_env, i)))
    return datasets, SemGroundTruth(w_c, w_a, scramble, v)


def gen_sem_protocol(variant: str, d: int = 10, n_per_env: int = 1000, seed: int = 0):
    """Train environments at the two low noises, validation and test at the
    held-out higher noises. Returns (train list, validation, test, truth)."""
    noises = list(SEM_TRAIN_NOISES) + [SEM_VAL_NOISE, SEM_TEST_NOISE]
    datasets, truth = gen_sem(variant, d=d, n_per_env=n_per_env, env_noises=noises, seed=seed)
    return datasets[:2], datasets[2], datasets[3], truth


def _balanced_classes(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Class labels as balanced as n allows, in random order."""
    y = np.repeat(np.arange(k), n // k)
    if n % k:
        y = np.concatenate([y, rng.choice(k, size=n % k, replace=False)])
    rng.shuffle(y)
    return y


@dataclass(frozen=True)
class ProxySpec:
    """Procedural stand-in for digit images: one Gaussian cluster per class."""

    n_per_env: int = 2000
    n_test: int = 1000
    dim: int = 16
    k_classes: int = 10
    scale: float = 2.0
    sigma: float = 1.0


def _proxy_digits(spec: ProxySpec, n: int, rng: np.random.Generator) -> Dataset:
    y = _balanced_classes(n, spec.k_classes, rng)
    centers = np.zeros((spec.k_classes, spec.dim))
    centers[np.arange(spec.k_classes), np.arange(spec.k_classes) % spec.dim] = spec.scale
    feats = centers[y] + rng.normal(0.0, spec.sigma, size=(n, spec.dim))
    return Dataset(features=feats, labels=y, task="multiclass", n_classes=spec.k_classes)


def gen_color_spurious(base, label_noise: float = 0.25, env_color_probs=(0.1, 0.2),
                       test_color_prob: float = 0.9, seed: int = 0):
    """Two-channel color benchmark: binary label from class parity with flip
    probability `label_noise`; a color channel agrees with the (possibly
    flipped) label with probability 1 - p_e. Returns (train datasets, test).

    base is either a multiclass Dataset (rows are shuffled and split into
    len(env_color_probs) train environments plus a test part) or a ProxySpec.
    """
    rng = rng_from(seed, "color")
    E = len(env_color_probs)
    if isinstance(base, Dataset):
        order = rng.permutation(base.n)
        n_env = base.n // (E + 1)
        parts = []
        for e in range(E):
            idx = order[e * n_env:(e + 1) * n_env]
            parts.append((base.features[idx], base.labels[idx]))
        idx = order[E * n_env:]
        parts.append((base.features[idx], base.labels[idx]))
    else:
        parts = []
        for e in range(E):
            d = _proxy_digits(base, base.n_per_env, rng_from(seed, "color-digits", e))
            parts.append((d.features, d.labels))
        d = _proxy_digits(base, base.n_test, rng_from(seed, "color-digits", E))
        parts.append((d.features, d.labels))

    probs = list(env_color_probs) + [test_color_prob]
    out = []
    for e, ((feats, classes), p) in enumerate(zip(parts, probs)):
        prng = rng_from(seed, "color-env", e)
        n = feats.shape[0]
        y = (np.asarray(classes) % 2).astype(np.int64)
        y = np.where(prng.random(n) < label_noise, 1 - y, y)
        disagree = prng.random(n) < p
        color = np.where(disagree, 1 - y, y)
        blocks = np.hstack([feats * (color == 0)[:, None], feats * (color == 1)[:, None]])
        out.append(Dataset(
            features=blocks, labels=y, task="binary",
            env_id=np.full(n, e), spurious_id=color,
            causal_id=np.asarray(classes, dtype=np.int64),
            is_shuffled=color != y,
        ))
    return out[:E], out[E]


@dataclass(frozen=True)
class BackgroundSpec:
    """Ten fixed background images and the class->background mappings.

    train_map and test_map are bijections on {0..9} with train_map[k] !=
    test_map[k] for every k, so no digit/background pair from training
    reappears at test time. shuffle_rule "any_remaining" redirects a shuffled
    sample to one of the 8 backgrounds outside both maps; "predecided" always
    uses alt_map[k].
    """

    backgrounds: np.ndarray  # (10, 3*side*side) floats in [0, 1], plane-major
    train_map: np.ndarray
    test_map: np.ndarray
    shuffle_rule: str = "any_remaining"
    alt_map: np.ndarray | None = None

    def __post_init__(self):
        bg = np.asarray(self.backgrounds, dtype=np.float64)
        if bg.ndim != 2 or bg.shape[0] != 10:
            raise ValueError("backgrounds must be (10, pixels)")
        object.__setattr__(self, "backgrounds", bg)
        for name in ("train_map", "test_map", "alt_map"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m, dtype=np.int64).reshape(-1)
            if m.shape[0] != 10 or sorted(m.tolist()) != list(range(10)):
                raise ValueError(f"{name} must be a permutation of 0..9")
            object.__setattr__(self, name, m)
        if (self.train_map == self.test_map).any():
            raise ValueError("train_map and test_map must differ for every class")
        if self.shuffle_rule not in ("any_remaining", "predecided"):
            raise ValueError(f"unknown shuffle rule {self.shuffle_rule!r}")
        if self.shuffle_rule == "predecided":
            if self.alt_map is None:
                raise ValueError("predecided shuffling needs alt_map")
            if (self.alt_map == self.train_map).any() or (self.alt_map == self.test_map).any():
                raise ValueError("alt_map must avoid both train and test backgrounds per class")


def _distinct_permutation(rng: np.random.Generator, *avoid: np.ndarray) -> np.ndarray:
    while True:
        p = rng.permutation(10)
        if all(not (p == a).any() for a in avoid):
            return p


def random_background_spec(backgrounds: np.ndarray, seed: int = 0,
                           shuffle_rule: str = "any_remaining") -> BackgroundSpec:
    rng = rng_from(seed, "bgspec")
    train_map = rng.permutation(10)
    test_map = _distinct_permutation(rng, train_map)
    alt_map = None
    if shuffle_rule == "predecided":
        alt_map = _distinct_permutation(rng, train_map, test_map)
    return BackgroundSpec(backgrounds=backgrounds, train_map=train_map,
                          test_map=test_map, shuffle_rule=shuffle_rule, alt_map=alt_map)


def pick_class_backgrounds(records, seed: int = 0) -> np.ndarray:
    """One random image per CIFAR class from parsed records, as (10, 3072)
    floats in [0, 1]."""
    rng = rng_from(seed, "bgpick")
    by_class = {}
    for rec in records:
        by_class.setdefault(rec.label, []).append(rec)
    missing = [c for c in range(10) if c not in by_class]
    if missing:
        raise ValueError(f"no background candidates for classes {missing}")
    out = np.empty((10, 3072))
    for c in range(10):
        rec = by_class[c][rng.integers(len(by_class[c]))]
        out[c] = rec.pixels.astype(np.float64) / 255.0
    return out


CBMNIST_FULL_SIZES = (25000, 25000, 10000)
CBMNIST_SHUFFLE = {"I": (0.01, 0.02), "II": (0.01, 0.02), "III": (0.10, 0.20)}


def _shuffled_background(rng, digit, spec):
    if spec.shuffle_rule == "predecided":
        return spec.alt_map[digit]
    banned = {int(spec.train_map[digit]), int(spec.test_map[digit])}
    remaining = [c for c in range(10) if c not in banned]
    return remaining[rng.integers(len(remaining))]


def _compose(fg: np.ndarray, bg_flat: np.ndarray, side: int) -> np.ndarray:
    """Overlay binarized foregrounds onto backgrounds; foreground pixels
    (intensity > 0.5) become white in all channels."""
    n, d = fg.shape
    fside = int(round(np.sqrt(d)))
    pad = (side - fside) // 2
    mask = np.zeros((n, side, side), dtype=bool)
    mask[:, pad:pad + fside, pad:pad + fside] = fg.reshape(n, fside, fside) > 0.5
    out = bg_flat.reshape(n, 3, side, side).astype(np.float32).copy()
    out[np.broadcast_to(mask[:, None, :, :], out.shape)] = 1.0
    return out.reshape(n, 3 * side * side)


def gen_cbmnist(variant: str, foregrounds: Dataset, spec: BackgroundSpec, seed: int = 0,
                sizes: tuple[int, int, int] | None = None,
                shuffle_probs: tuple[float, float] | None = None):
    """Digit-on-background composition: (env1, env2, test) datasets.

    Training backgrounds follow spec.train_map except for per-sample Bernoulli
    shuffles (defaults 1%/2%, or 10%/20% for variant III); the test side uses
    spec.test_map with no shuffling. Variant II requires a predecided spec.
    """
    variant = variant.upper()
    if variant not in CBMNIST_SHUFFLE:
        raise ValueError("variant must be I, II or III")
    if variant == "II" and spec.shuffle_rule != "predecided":
        raise ValueError("variant II needs a BackgroundSpec with predecided shuffling")
    if variant in ("I", "III") and spec.shuffle_rule != "any_remaining":
        raise ValueError(f"variant {variant} needs any_remaining shuffling")
    probs = CBMNIST_SHUFFLE[variant] if shuffle_probs is None else tuple(shuffle_probs)

    n = foregrounds.n
    if sizes is None:
        if n >= sum(CBMNIST_FULL_SIZES):
            sizes = CBMNIST_FULL_SIZES
        else:
            n1 = (5 * n) // 12
            sizes = (n1, n1, n - 2 * n1)
    if sum(sizes) > n:
        raise ValueError(f"need {sum(sizes)} foregrounds, have {n}")
    side = int(round(np.sqrt(spec.backgrounds.shape[1] / 3)))

    rng = rng_from(seed, "cbmnist-split")
    order = rng.permutation(n)
    bounds = np.cumsum([0] + list(sizes))
    out = []
    for e in range(3):
        idx = order[bounds[e]:bounds[e + 1]]
        digits = foregrounds.labels[idx].astype(np.int64)
        erng = rng_from(seed, "cbmnist-env", e)
        m = len(idx)
        if e < 2:
            shuffled = erng.random(m) < probs[e]
            bg_class = spec.train_map[digits].copy()
            for i in np.flatnonzero(shuffled):
                bg_class[i] = _shuffled_background(erng, digits[i], spec)
        else:
            shuffled = np.zeros(m, dtype=bool)
            bg_class = spec.test_map[digits].copy()
        feats = _compose(foregrounds.features[idx], spec.backgrounds[bg_class], side)
        out.append(Dataset(
            features=feats, labels=digits, task="multiclass", n_classes=10,
            env_id=np.full(m, e), spurious_id=bg_class,
            causal_id=digits, is_shuffled=shuffled,
        ))
    return out[0], out[1], out[2]


def gen_proxy_cbmnist(n_per_env: int = 5000, k_classes: int = 10, dims: int = 20,
                      shuffle_probs=(0.01, 0.02), seed: int = 0, n_test: int | None = None,
                      causal_noise: float = 0.05, causal_scale: float = 2.5,
                      causal_sigma: float = 1.0, spurious_scale: float = 1.0,
                      spurious_sigma: float = 0.5):
    """Download-free analog of the digit-on-background benchmark.

    Features are a causal cluster block (centered on a noisy copy of the
    label: flipped to another class with probability causal_noise, standing
    in for ambiguous digit shapes) next to a lower-variance spurious cluster
    block centered on the background class. Backgrounds follow a random
    train map except for Bernoulli-shuffled samples, which get one of the 8
    backgrounds outside the train and test maps; the test environment uses a
    per-class disjoint map. The spurious id is the more label-informative one
    by construction (shuffle rate well below causal_noise) and its block has
    strictly smaller variance.
    """
    if dims < 2 * k_classes:
        raise ValueError(f"dims must be at least {2 * k_classes}")
    if n_test is None:
        n_test = max(1, (2 * n_per_env) // 5)
    rng = rng_from(seed, "proxy-maps")
    train_map = rng.permutation(k_classes)
    while True:
        test_map = rng.permutation(k_classes)
        if not (test_map == train_map).any():
            break
    d_causal = dims // 2
    d_sp = dims - d_causal
    cen_c = np.zeros((k_classes, d_causal))
    cen_c[np.arange(k_classes), np.arange(k_classes)] = causal_scale
    cen_s = np.zeros((k_classes, d_sp))
    cen_s[np.arange(k_classes), np.arange(k_classes)] = spurious_scale

    sizes = [n_per_env, n_per_env, n_test]
    probs = list(shuffle_probs) + [None]
    out = []
    for e, (m, p) in enumerate(zip(sizes, probs)):
        erng = rng_from(seed, "proxy-env", e)
        y = _balanced_classes(m, k_classes, erng)
        flip = erng.random(m) < causal_noise
        shift = erng.integers(1, k_classes, size=m)
        causal_id = np.where(flip, (y + shift) % k_classes, y)
        if p is None:
            shuffled = np.zeros(m, dtype=bool)
            spurious_id = test_map[y]
        else:
            shuffled = erng.random(m) < p
            spurious_id = train_map[y].copy()
            for i in np.flatnonzero(shuffled):
                banned = {int(train_map[y[i]]), int(test_map[y[i]])}
                remaining = [c for c in range(k_classes) if c not in banned]
                spurious_id[i] = remaining[erng.integers(len(remaining))]
        feats = np.hstack([
            cen_c[causal_id] + erng.normal(0.0, causal_sigma, size=(m, d_causal)),
            cen_s[spurious_id] + erng.normal(0.0, spurious_sigma, size=(m, d_sp)),
        ])
        out.append(Dataset(
            features=feats, labels=y, task="multiclass", n_classes=k_classes,
            env_id=np.full(m, e), spurious_id=spurious_id,
            causal_id=causal_id, is_shuffled=shuffled,
        ))
    return out[0], out[1], out[2]


def regroup_shuffled(env1: Dataset, env2: Dataset) -> tuple[Dataset, Dataset]:
    """Regroup two environments so every shuffled sample lands in the second
    returned dataset and everything else in the first."""
    env1.require_meta("is_shuffled")
    env2.require_meta("is_shuffled")
    pool = concat_datasets([env1, env2])
    p = EnvPartition(soft_q=pool.is_shuffled.astype(np.float64))
    return split_by_partition(pool, p)
