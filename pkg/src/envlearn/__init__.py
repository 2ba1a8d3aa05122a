"""Invariant learning when environment labels are unknown: reference-model
environment inference, repeated inference with majority retraining, and the
synthetic spurious-correlation benchmarks used to study them."""

from .core import (Dataset, EnvPartition, concat_datasets, load_dataset,
                   rng_from, save_dataset, split_by_partition, subset)
from .datagen import (BackgroundSpec, ProxySpec, SemGroundTruth, gen_cbmnist,
                      gen_color_spurious, gen_proxy_cbmnist, gen_sem,
                      gen_sem_protocol, regroup_shuffled)
from .envinfer import (EiResult, ei_optimize, exhaustive_ei, majority_split,
                       sign_partition)
from .metrics import (CausalErrorReport, MiDiagnostics, causal_errors,
                      conjecture_gap, evaluate, mi_diagnostics,
                      minority_dynamics, mutual_info_discrete)
from .models import (AdamState, LinearModel, MlpModel, forward, grad,
                     load_model, save_model, train)
from .objectives import (PerSampleStats, ei_objective, irm_penalty,
                         irmv1_objective, per_sample_stats, stats_for,
                         werm_risk)
from .pipelines import (PipelineTrace, TrainConfig, run_ei_step, run_eiil,
                        run_erm, run_irm, run_reiil, run_werm, select_model)

__version__ = "0.1.0"
