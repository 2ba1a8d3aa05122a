"""End-to-end procedures: ERM, IRM on given environments, weighted ERM,
single-step environment inference, and the repeated-EI loop with
majority-environment retraining.

Seeds for the stages of a composite run are derived from the config seed with
stable labels, so a manual chain (reference ERM, EI step, invariant learner)
reproduces the composite run bit for bit when fed the same derived seeds.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import Dataset, EnvPartition, concat_datasets, rng_from, split_by_partition
from .envinfer import EiResult, ei_optimize, majority_split
from .errors import EmptyEnvironment, MinorityEmpty, NonFiniteLoss
from .metrics import conjecture_gap, evaluate
from .models import AdamState, LinearModel, MlpModel, Model, train, uniform_weights
from .objectives import irmv1_objective, stats_for, werm_weights


def derive_seed(seed: int, *labels) -> int:
    return int(rng_from(seed, *labels).integers(0, 2 ** 63))


@dataclass(frozen=True)
class TrainConfig:
    """Model, optimizer and pipeline settings shared by all procedures."""

    model: str = "mlp"  # "linear" | "mlp"
    hidden: tuple[int, ...] = (256, 256)
    bias: bool = True
    steps: int = 900
    lr: float = 1e-3
    l2: float = 1.1e-3
    seed: int = 0
    # invariant learner
    lam: float = 1e4
    anneal_steps: int = 100
    lam_sweep: tuple[float, ...] | None = None
    il_steps: int | None = None  # defaults to steps
    # environment inference
    ei_steps: int = 2000
    ei_lr: float = 0.01
    soft_norm: bool = False

    def with_seed(self, *labels) -> "TrainConfig":
        return replace(self, seed=derive_seed(self.seed, *labels))


def build_model(cfg: TrainConfig, data: Dataset) -> Model:
    if cfg.model == "linear":
        return LinearModel.init(data.dim, bias=cfg.bias, seed=cfg.seed)
    if cfg.model == "mlp":
        k = 1 if data.task in ("regression", "binary") else data.n_classes
        return MlpModel.init([data.dim, *cfg.hidden, k], seed=cfg.seed)
    raise ValueError(f"unknown model kind {cfg.model!r}")


def run_erm(pool: Dataset, cfg: TrainConfig) -> Model:
    """Plain pooled training with uniform sample weights."""
    model = build_model(cfg, pool)
    train(model, pool, uniform_weights(pool), AdamState(lr=cfg.lr), cfg.steps, l2=cfg.l2)
    return model


def run_werm(envs: list[Dataset], cfg: TrainConfig) -> Model:
    """Weighted ERM: every environment contributes equal total weight."""
    pool = concat_datasets(envs)
    ids = np.concatenate([np.full(e.n, i) for i, e in enumerate(envs)])
    model = build_model(cfg, pool)
    train(model, pool, werm_weights(ids), AdamState(lr=cfg.lr), cfg.steps, l2=cfg.l2)
    return model


def run_irm(envs: list[Dataset], cfg: TrainConfig, lam: float | None = None) -> Model:
    """Sum of environment risks plus lam times the per-environment penalty.

    lam is held at 1 for the first anneal_steps, then switched to its target
    with the whole objective rescaled by 1/lam to keep step sizes stable.
    """
    if not envs:
        raise EmptyEnvironment("need at least one environment")
    lam = cfg.lam if lam is None else lam
    steps = cfg.il_steps or cfg.steps
    model = build_model(cfg, envs[0])
    opt = AdamState(lr=cfg.lr)
    for step in range(steps):
        lam_t = 1.0 if step < cfg.anneal_steps else lam
        value, grads = irmv1_objective(envs, model, lam_t)
        for g, p, pen in zip(grads, model.params(), model.penalized_mask()):
            if pen:
                g += 2.0 * cfg.l2 * p
        if lam_t > 1.0:
            value /= lam_t
            grads = [g / lam_t for g in grads]
        if not np.isfinite(value):
            raise NonFiniteLoss(f"objective {value} at step {step}")
        model.set_params(opt.step(model.params(), grads))
    return model


def run_ei_step(model: Model, pool: Dataset, cfg: TrainConfig) -> EiResult:
    """Per-sample statistics of the reference model on the full pool, then
    soft-assignment ascent; the hardened partition is in the result."""
    stats = stats_for(model, pool)
    return ei_optimize(stats, steps=cfg.ei_steps, lr=cfg.ei_lr,
                       seed=cfg.seed, soft_norm=cfg.soft_norm)


def select_model(candidates: list, validation: Dataset):
    """Pick the (cfg, model) pair with the lowest validation error; first wins ties."""
    if not candidates:
        raise EmptyEnvironment("no candidates to select from")
    errs = [evaluate(model, validation) for _, model in candidates]
    return candidates[int(np.argmin(errs))]


def _fit_invariant(envs, cfg, il_kind, validation):
    """Returns (model, selection record)."""
    if il_kind == "WERM":
        return run_werm(envs, cfg), {}
    if il_kind != "IRM":
        raise ValueError(f"unknown invariant learner {il_kind!r}")
    if cfg.lam_sweep and validation is not None:
        candidates = [(lam, run_irm(envs, cfg, lam=lam)) for lam in cfg.lam_sweep]
        lam, model = select_model(candidates, validation)
        return model, {"lam": lam}
    return run_irm(envs, cfg), {}


@dataclass
class IterationRecord:
    """Diagnostics for one repeated-EI iteration. The reference metrics are
    those of the ERM retrained on this iteration's majority environment."""

    iteration: int
    partition: EnvPartition
    ei_objective: float
    majority_size: int = 0
    minority_size: int = 0
    ref_majority_error: float | None = None
    ref_minority_error: float | None = None
    minority_shuffled_fraction: float | None = None
    conjecture_gap: float | None = None
    note: str = ""


@dataclass
class PipelineTrace:
    records: list[IterationRecord] = field(default_factory=list)
    final_model: Model | None = None
    final_partition: EnvPartition | None = None
    final_note: str = ""
    selection: dict = field(default_factory=dict)


def run_reiil(pool: Dataset, n_iters: int = 9, il_kind: str = "IRM",
              cfg: TrainConfig = TrainConfig(), validation: Dataset | None = None) -> PipelineTrace:
    """Repeated environment inference with majority retraining.

    Iteration t infers a partition of the full pool with the current
    reference model, then retrains a fresh ERM reference on the majority
    side. n_iters = 1 with il_kind = "IRM" is exactly the single-step
    inference pipeline. The loop stops early (keeping the last valid
    partition) when gradients degenerate or a side of the partition is empty;
    afterwards the invariant learner is fit on the final partition.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    trace = PipelineTrace()
    has_shuffle = pool.is_shuffled is not None
    has_ids = pool.spurious_id is not None and pool.causal_id is not None

    ref = run_erm(pool, cfg.with_seed("ref", 0))
    final_partition = None
    for t in range(1, n_iters + 1):
        ei = run_ei_step(ref, pool, cfg.with_seed("ei", t))
        rec = IterationRecord(iteration=t, partition=ei.partition, ei_objective=ei.final_objective)
        if ei.degenerate:
            rec.note = "degenerate gradients; stopped"
            trace.records.append(rec)
            break
        try:
            majority, minority = majority_split(pool, ei.partition)
        except MinorityEmpty:
            rec.note = "minority empty; stopped"
            trace.records.append(rec)
            break
        final_partition = ei.partition
        rec.majority_size, rec.minority_size = majority.n, minority.n
        ref = run_erm(majority, cfg.with_seed("ref", t))
        rec.ref_majority_error = evaluate(ref, majority)
        rec.ref_minority_error = evaluate(ref, minority)
        if has_shuffle:
            rec.minority_shuffled_fraction = float(minority.is_shuffled.mean())
        if has_ids:
            rec.conjecture_gap = conjecture_gap(pool, majority)
        trace.records.append(rec)

    if final_partition is None:
        trace.final_model = ref
        trace.final_partition = trace.records[-1].partition if trace.records else None
        trace.final_note = "no usable partition; returning the reference model"
        return trace

    envs = list(split_by_partition(pool, final_partition))
    trace.final_model, trace.selection = _fit_invariant(envs, cfg.with_seed("il"), il_kind, validation)
    trace.final_partition = final_partition
    return trace


def run_eiil(pool: Dataset, cfg: TrainConfig = TrainConfig(), il_kind: str = "IRM",
             validation: Dataset | None = None) -> PipelineTrace:
    """Single-step environment inference then invariant learning."""
    return run_reiil(pool, n_iters=1, il_kind=il_kind, cfg=cfg, validation=validation)
