"""Environment inference: maximize the two-environment penalty objective over
soft per-sample assignments, plus exact small-N oracles and partition helpers.

For a scalar output multiplier the objective is convex in the assignment
vector, so its maximum sits at a vertex of [0,1]^N — the partition that
groups samples by the sign of their per-sample gradient. `sign_partition`
returns that vertex directly; `ei_optimize` reaches it by guarded Adam ascent
on sigmoid logits and is the route used by the pipelines (it also covers the
soft-normalization variant where the vertex argument does not apply).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import Dataset, EnvPartition, rng_from, split_by_partition
from .errors import MinorityEmpty, TooLarge
from .objectives import PerSampleStats, ei_objective


@dataclass(frozen=True)
class EiResult:
    partition: EnvPartition
    objective_trace: np.ndarray  # accepted objective value per step
    final_objective: float  # objective of the hardened partition, recomputed
    degenerate: bool = False  # all per-sample gradients were exactly zero


def ei_optimize(stats: PerSampleStats, steps: int = 2000, lr: float = 0.01,
                seed: int = 0, soft_norm: bool = False) -> EiResult:
    """Ascend the soft objective with full-batch Adam on logits v, q = sigmoid(v).

    Steps that would decrease the objective by more than 1e-9 are rejected
    (state restored, learning rate halved), so the recorded trace is
    non-decreasing up to that tolerance. The returned partition hardens the
    final q at 0.5.
    """
    g = stats.w_grads
    n = stats.n
    if n < 2:
        raise ValueError("need at least two samples to infer environments")
    if not np.any(g):
        q = np.full(n, 0.5)
        return EiResult(EnvPartition(soft_q=q), np.empty(0), 0.0, degenerate=True)

    rng = rng_from(seed, "ei-init")
    v = rng.normal(0.0, 0.1, size=n)
    m = np.zeros(n)
    s = np.zeros(n)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    cur_lr = lr

    def objective(qv):
        return ei_objective(stats, qv, soft_norm=soft_norm)

    def grad_q(qv):
        if soft_norm:
            # numerical gradient is avoided: closed form for both terms
            s1, s2 = qv.sum(), (1.0 - qv).sum()
            G1 = (qv * g).sum() / s1 if s1 else 0.0
            G2 = ((1.0 - qv) * g).sum() / s2 if s2 else 0.0
            d1 = 2.0 * G1 * (g - G1) / s1 if s1 else 0.0
            d2 = -2.0 * G2 * (g - G2) / s2 if s2 else 0.0
            return d1 + d2
        G1 = (qv * g).sum() / n
        G2 = ((1.0 - qv) * g).sum() / n
        return (2.0 / n) * (G1 - G2) * g

    q = _sigmoid(v)
    cur = objective(q)
    trace = np.empty(steps)
    t = 0
    for step in range(steps):
        dq = grad_q(q)
        dv = dq * q * (1.0 - q)
        t += 1
        m = beta1 * m + (1 - beta1) * dv
        s = beta2 * s + (1 - beta2) * dv * dv
        m_hat = m / (1 - beta1 ** t)
        s_hat = s / (1 - beta2 ** t)
        v_new = v + cur_lr * m_hat / (np.sqrt(s_hat) + eps)  # ascent
        q_new = _sigmoid(v_new)
        new = objective(q_new)
        if new < cur - 1e-9:
            cur_lr *= 0.5  # overshoot near a vertex; keep the old point
        else:
            v, q, cur = v_new, q_new, new
        trace[step] = cur

    partition = EnvPartition(soft_q=q)
    final = objective(partition.hard.astype(np.float64))
    return EiResult(partition, trace, final)


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sign_partition(stats: PerSampleStats) -> EnvPartition:
    """Vertex maximizer for the default normalization: environment 1 gets the
    samples with positive gradient, zeros go to environment 0."""
    return EnvPartition(soft_q=(stats.w_grads > 0).astype(np.float64))


def exhaustive_ei(stats: PerSampleStats, soft_norm: bool = False) -> tuple[EnvPartition, float]:
    """Enumerate all 2^N hard assignments (N <= 20) and return a maximizer."""
    n = stats.n
    if n > 20:
        raise TooLarge(f"2^{n} assignments is too many to enumerate")
    best_q = None
    best = -np.inf
    for bits in range(1 << n):
        q = np.array([(bits >> i) & 1 for i in range(n)], dtype=np.float64)
        val = ei_objective(stats, q, soft_norm=soft_norm)
        if val > best:
            best, best_q = val, q
    return EnvPartition(soft_q=best_q), float(best)


def majority_split(data: Dataset, p: EnvPartition) -> tuple[Dataset, Dataset]:
    """(majority, minority) by environment size; ties make environment 0 the
    majority. Raises MinorityEmpty when one side has no samples."""
    env0, env1 = split_by_partition(data, p)
    if env0.n == 0 or env1.n == 0:
        raise MinorityEmpty(f"partition sizes {env0.n}/{env1.n}")
    if env1.n > env0.n:
        return env1, env0
    return env0, env1


def export_partition_csv(p: EnvPartition, path, data: Dataset | None = None) -> None:
    """index, soft_q, hard (+ is_shuffled, spurious_id when data carries them)."""
    extra = []
    if data is not None:
        extra = [f for f in ("is_shuffled", "spurious_id") if getattr(data, f) is not None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "soft_q", "hard"] + extra)
        for i in range(p.n):
            row = [i, repr(float(p.soft_q[i])), int(p.hard[i])]
            for f in extra:
                row.append(int(getattr(data, f)[i]))
            w.writerow(row)
