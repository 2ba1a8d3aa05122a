"""Evaluation and diagnostics: task errors, causal/non-causal weight errors
for the regression benchmarks, plug-in mutual information over discrete ids,
and the majority-subset information gap."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset
from .datagen import SemGroundTruth
from .errors import DimensionMismatch, MissingMetadata
from .models import LinearModel, Model


def predictions(model: Model, data: Dataset) -> np.ndarray:
    out = model.forward(data.features)
    if data.task == "regression":
        return out.reshape(-1)
    if data.task == "binary":
        return (out.reshape(-1) > 0).astype(np.int64)
    if out.ndim != 2:
        raise DimensionMismatch("multiclass evaluation needs (n, K) outputs")
    return out.argmax(axis=1)


def evaluate(model: Model, data: Dataset, by_env: bool = False):
    """MSE for regression, 1 - accuracy otherwise. With by_env=True also
    returns the same error keyed by env_id."""
    pred = predictions(model, data)
    if data.task == "regression":
        err = pred - data.labels
        per_sample = err * err
    else:
        per_sample = (pred != data.labels).astype(np.float64)
    total = float(per_sample.mean())
    if not by_env:
        return total
    data.require_meta("env_id")
    breakdown = {int(e): float(per_sample[data.env_id == e].mean())
                 for e in np.unique(data.env_id)}
    return total, breakdown


def accuracy(model: Model, data: Dataset) -> float:
    if data.task == "regression":
        raise ValueError("accuracy is undefined for regression")
    return 1.0 - evaluate(model, data)


@dataclass(frozen=True)
class CausalErrorReport:
    ce: float  # mean squared deviation of causal-coordinate weights
    nce: float  # mean squared deviation of anti-causal weights from zero


def causal_errors(model: LinearModel, truth: SemGroundTruth) -> CausalErrorReport:
    """Compare a linear model against the invariant solution (w_causal, 0).

    Scrambled-variant weights are first mapped back to raw coordinates
    through the transpose of the scramble.
    """
    d = truth.d
    w = np.asarray(model.weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != 2 * d:
        raise DimensionMismatch(f"model has {w.shape[0]} weights, expected {2 * d}")
    w_raw = truth.scramble.T @ w
    ce = float(np.mean((w_raw[:d] - truth.w_causal) ** 2))
    nce = float(np.mean(w_raw[d:] ** 2))
    return CausalErrorReport(ce=ce, nce=nce)


def mutual_info_discrete(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in estimate (nats) from the empirical joint of two label vectors."""
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.shape != b.shape or a.shape[0] < 1:
        raise DimensionMismatch("label vectors must be equally sized and non-empty")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    n = a.shape[0]
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= n
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())
    return max(mi, 0.0)


@dataclass(frozen=True)
class MiDiagnostics:
    i_yz: float  # label vs spurious id, nats
    i_yx: float  # label vs causal id, nats

    @property
    def gap(self) -> float:
        return self.i_yz - self.i_yx


def mi_diagnostics(data: Dataset) -> MiDiagnostics:
    data.require_meta("spurious_id", "causal_id")
    return MiDiagnostics(
        i_yz=mutual_info_discrete(data.labels, data.spurious_id),
        i_yx=mutual_info_discrete(data.labels, data.causal_id),
    )


def conjecture_gap(full: Dataset, sub: Dataset) -> float:
    """[I_sub(Y;Z) - I_sub(Y;X)] - [I_full(Y;Z) - I_full(Y;X)]; positive means
    the subset couples label and spurious id more tightly than the pool."""
    return mi_diagnostics(sub).gap - mi_diagnostics(full).gap


def minority_dynamics(trace) -> list[dict]:
    """Per-iteration rows {iteration, minority_ref_accuracy,
    minority_shuffled_fraction} from a pipeline trace."""
    if not trace.records:
        raise ValueError("trace has no iterations")
    rows = []
    for rec in trace.records:
        if rec.minority_shuffled_fraction is None:
            raise MissingMetadata("trace pool carried no is_shuffled metadata")
        rows.append({
            "iteration": rec.iteration,
            "minority_ref_accuracy": (None if rec.ref_minority_error is None
                                      else 1.0 - rec.ref_minority_error),
            "minority_shuffled_fraction": rec.minority_shuffled_fraction,
        })
    return rows
