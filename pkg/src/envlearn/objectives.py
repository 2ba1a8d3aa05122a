"""Risks and penalties built from per-sample statistics of a fixed model.

Everything here operates on PerSampleStats: for each sample, the loss
l(z_i, y_i) and the scalar derivative g_i = d l(w * z_i, y_i) / dw at w = 1,
where w is a dummy multiplier on the model output. The squared mean of the
g_i over an environment is the invariance penalty; maximizing it over soft
assignments is the environment-inference objective.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset
from .errors import DimensionMismatch, EmptyEnvironment
from .models import Model, _loss_and_dout, _sigmoid


@dataclass(frozen=True)
class PerSampleStats:
    losses: np.ndarray  # (n,) l(z_i, y_i)
    w_grads: np.ndarray  # (n,) d l(w z_i, y_i)/dw at w = 1

    def __post_init__(self):
        losses = np.asarray(self.losses, dtype=np.float64).reshape(-1)
        w_grads = np.asarray(self.w_grads, dtype=np.float64).reshape(-1)
        if losses.shape != w_grads.shape:
            raise DimensionMismatch("losses and w_grads must have equal length")
        if not (np.isfinite(losses).all() and np.isfinite(w_grads).all()):
            raise ValueError("per-sample statistics must be finite")
        object.__setattr__(self, "losses", losses)
        object.__setattr__(self, "w_grads", w_grads)

    @property
    def n(self) -> int:
        return self.losses.shape[0]


def per_sample_stats(outputs: np.ndarray, labels: np.ndarray, task: str) -> PerSampleStats:
    """Losses and scalar-multiplier gradients for one batch of outputs.

    regression: l = (z - y)^2,            g = 2 z (z - y)
    binary:     l = softplus(z) - y z,    g = z (sigmoid(z) - y)
    multiclass: l = CE(z, y),             g = z . (softmax(z) - onehot(y))
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    labels = np.asarray(labels)
    losses, _ = _loss_and_dout(outputs, labels, task)
    if task == "regression":
        z = outputs.reshape(-1)
        g = 2.0 * z * (z - labels)
    elif task == "binary":
        z = outputs.reshape(-1)
        g = z * (_sigmoid(z) - labels.astype(np.float64))
    elif task == "multiclass":
        z = outputs
        zmax = z.max(axis=1, keepdims=True)
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        g = (z * p).sum(axis=1) - z[np.arange(z.shape[0]), labels.astype(np.int64)]
    else:
        raise ValueError(f"unknown task {task!r}")
    return PerSampleStats(losses=losses, w_grads=g)


def stats_for(model: Model, data: Dataset) -> PerSampleStats:
    return per_sample_stats(model.forward(data.features), data.labels, data.task)


def irm_penalty(stats: PerSampleStats, q_e: np.ndarray, soft_norm: bool = False) -> float:
    """((1/N) sum_i q_e[i] g_i)^2 — the squared risk gradient w.r.t. the
    scalar multiplier for the soft environment weighted by q_e.

    soft_norm=True normalizes by sum(q_e) instead of N (alternative reading
    of the soft risk; off by default).
    """
    q = np.asarray(q_e, dtype=np.float64).reshape(-1)
    if q.shape[0] != stats.n:
        raise DimensionMismatch(f"{q.shape[0]} assignments for {stats.n} samples")
    denom = q.sum() if soft_norm else stats.n
    if denom == 0:
        return 0.0
    G = float((q * stats.w_grads).sum() / denom)
    return G * G


def ei_objective(stats: PerSampleStats, q: np.ndarray, soft_norm: bool = False) -> float:
    """Two-environment soft objective: penalty(q) + penalty(1 - q)."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    return irm_penalty(stats, q, soft_norm) + irm_penalty(stats, 1.0 - q, soft_norm)


def _penalty_dout(outputs, labels, task):
    """d g_i / d outputs_i for each task (needed to backprop the penalty)."""
    if task == "regression":
        z = outputs.reshape(-1)
        return (4.0 * z - 2.0 * labels).reshape(np.shape(outputs))
    if task == "binary":
        z = outputs.reshape(-1)
        s = _sigmoid(z)
        return (s - labels.astype(np.float64) + z * s * (1.0 - s)).reshape(np.shape(outputs))
    z = outputs
    zmax = z.max(axis=1, keepdims=True)
    p = np.exp(z - zmax)
    p /= p.sum(axis=1, keepdims=True)
    s = (z * p).sum(axis=1, keepdims=True)
    dg = p + p * (z - s)
    dg[np.arange(z.shape[0]), labels.astype(np.int64)] -= 1.0
    return dg


def irmv1_objective(env_datasets: list[Dataset], model: Model, lam: float):
    """sum_e [ mean-loss_e + lam * ((1/n_e) sum_i g_i)^2 ] with gradients
    flowing through both the risk and the penalty term.

    Returns (value, param grads).
    """
    if not env_datasets:
        raise EmptyEnvironment("need at least one environment")
    total = 0.0
    acc = None
    for env in env_datasets:
        if env.n == 0:
            raise EmptyEnvironment("environment with zero samples")
        outputs, cache = model.forward_cache(env.features)
        losses, dl_dout = _loss_and_dout(outputs, env.labels, env.task)
        n = env.n
        risk = float(losses.mean())
        # chain rule for a scalar output multiplier: g_i = sum_k z_ik dl/dz_ik
        prod = outputs * dl_dout
        g = prod.sum(axis=1) if prod.ndim == 2 else prod
        G = float(g.sum() / n)
        total += risk + lam * G * G
        dout = dl_dout / n
        if lam:
            dout = dout + (2.0 * lam * G / n) * _penalty_dout(outputs, env.labels, env.task)
        grads = model.backward(cache, dout)
        acc = grads if acc is None else [a + b for a, b in zip(acc, grads)]
    return total, acc


def werm_risk(stats_per_env: list[PerSampleStats]) -> float:
    """Mean over environments of the within-environment mean loss, so each
    environment contributes equally regardless of size."""
    if not stats_per_env:
        raise EmptyEnvironment("need at least one environment")
    means = []
    for stats in stats_per_env:
        if stats.n == 0:
            raise EmptyEnvironment("environment with zero samples")
        means.append(stats.losses.mean())
    return float(np.mean(means))


def werm_weights(env_ids: np.ndarray) -> np.ndarray:
    """Per-sample weights 1/(E * n_e) realizing the WERM risk as a weighted
    mean (weights sum to 1)."""
    env_ids = np.asarray(env_ids).reshape(-1)
    uniq, counts = np.unique(env_ids, return_counts=True)
    w = np.empty(env_ids.shape[0])
    for u, c in zip(uniq, counts):
        w[env_ids == u] = 1.0 / (len(uniq) * c)
    return w
