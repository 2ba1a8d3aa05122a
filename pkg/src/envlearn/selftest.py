"""Quick built-in oracle suite: cheap independent cross-checks of the
numerical core, runnable from the CLI without pytest."""
from __future__ import annotations

import numpy as np

from .core import rng_from
from .envinfer import exhaustive_ei, sign_partition
from .ingest import IdxTensor, parse_cifar10, parse_idx, write_cifar10, write_idx, Cifar10Record
from .models import LinearModel, MlpModel, grad
from .core import Dataset
from .objectives import PerSampleStats, ei_objective, irm_penalty, per_sample_stats


def _fd_penalty(outputs, labels, task, q, h=1e-5):
    """(dR/dw)^2 at w = 1 by central differences on the soft risk."""
    def risk(w):
        stats = per_sample_stats(np.asarray(outputs) * w, labels, task)
        return (q * stats.losses).sum() / len(q)
    d = (risk(1.0 + h) - risk(1.0 - h)) / (2 * h)
    return d * d


def check_penalty(trials=30) -> bool:
    rng = rng_from(7, "selftest-penalty")
    for t in range(trials):
        task = ("regression", "binary", "multiclass")[t % 3]
        n = 16
        if task == "multiclass":
            outputs = rng.normal(size=(n, 4))
            labels = rng.integers(0, 4, n)
        else:
            outputs = rng.normal(size=n)
            labels = rng.normal(size=n) if task == "regression" else rng.integers(0, 2, n)
        q = rng.random(n)
        stats = per_sample_stats(outputs, labels, task)
        want = _fd_penalty(outputs, labels, task, q)
        got = irm_penalty(stats, q)
        if abs(got - want) > 1e-6 * max(1.0, abs(want)):
            return False
    return True


def check_sign_vs_exhaustive(trials=50) -> bool:
    rng = rng_from(7, "selftest-ei")
    for _ in range(trials):
        n = int(rng.integers(2, 11))
        g = rng.normal(size=n)
        stats = PerSampleStats(losses=np.zeros(n), w_grads=g)
        _, best = exhaustive_ei(stats)
        got = ei_objective(stats, sign_partition(stats).soft_q)
        if got != best:
            return False
    return True


def check_roundtrip(trials=20) -> bool:
    rng = rng_from(7, "selftest-io")
    for _ in range(trials):
        dims = (int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        data = rng.integers(0, 256, int(np.prod(dims)), dtype=np.uint8)
        buf = write_idx(IdxTensor(dims=dims, data=data))
        if write_idx(parse_idx(buf)) != buf:
            return False
        recs = [Cifar10Record(label=int(rng.integers(0, 10)),
                              pixels=rng.integers(0, 256, 3072, dtype=np.uint8))
                for _ in range(int(rng.integers(1, 4)))]
        buf = write_cifar10(recs)
        if write_cifar10(parse_cifar10(buf)) != buf:
            return False
    return True


def check_model_gradients() -> bool:
    rng = rng_from(7, "selftest-grad")
    X = rng.normal(size=(8, 3))
    y = rng.integers(0, 3, 8)
    data = Dataset(features=X, labels=y, task="multiclass", n_classes=3)
    model = MlpModel.init([3, 5, 3], seed=11)
    w = rng.random(8) + 0.1
    grads, _ = grad(model, data, w, l2=1e-3)
    h = 1e-5
    for pi, p in enumerate(model.params()):
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = _loss_value(model, data, w, 1e-3)
            flat[j] = orig - h
            lm = _loss_value(model, data, w, 1e-3)
            flat[j] = orig
            fd = (lp - lm) / (2 * h)
            if abs(fd - grads[pi].reshape(-1)[j]) > 1e-4 * max(1.0, abs(fd)):
                return False
    return True


def _loss_value(model, data, w, l2):
    _, loss = grad(model, data, w)
    pen = sum(float((p * p).sum()) for p, m in zip(model.params(), model.penalized_mask()) if m)
    return loss + l2 * pen


def run() -> int:
    checks = [
        ("penalty matches finite differences", check_penalty),
        ("sign partition matches exhaustive search", check_sign_vs_exhaustive),
        ("idx/cifar round trips are identities", check_roundtrip),
        ("model gradients match finite differences", check_model_gradients),
    ]
    failed = 0
    for name, fn in checks:
        ok = fn()
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failed += 0 if ok else 1
    return 1 if failed else 0
