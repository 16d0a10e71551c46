"""moax: mixtures of low-rank adapter experts with per-layer counts and ranks.

A small, exact-by-construction lab for adapter-expert allocation: layer-wise
expert counts and rank schedules with rational-arithmetic budget accounting,
a frozen-base toy transformer trained through a deterministic tape autodiff
kernel, per-token routing with placeholder experts, and trace-based
instrumentation that ties measured activation back to the static plan.
"""

from .adapters import DEFAULT_INIT_STD, LoraAdapter, adapter_delta, init_adapter, placeholder_adapter
from .allocation import (
    ALPHALORA_EXPERT_COUNTS,
    REFERENCE_RANK,
    AllocationPlan,
    BudgetReport,
    BudgetRow,
    ExpertAllocation,
    RankSchedule,
    SiteSpec,
    active_units_static,
    budget_report,
    rank_schedule_eval,
    resolve_allocation,
    schedule_ranks,
    trainable_units,
    trainable_units_exact,
)
from .autodiff import Tape, Tensor, backward, numeric_gradient, relative_error
from .checkpoints import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, ContractError, MoaxError, ShapeError
from .gating import (
    ActivationPolicy,
    ExpertLayerSite,
    GateNetwork,
    TopK,
    TopP,
    gate_probs,
    moe_forward,
    renormalize,
    select_experts,
    select_topk,
    select_topp,
)
from .instrumentation import (
    ActivationTrace,
    TraceEntry,
    magnitude_histograms,
    measure_active_units,
    proportion_below,
    record_trace,
)
from .model import ToyModel, ToyModelConfig, build_model, toy_sites
from .runconfig import BudgetGeometry, RunConfig, build_plan, load_config, preset_plan, sweep_plan
from .tasks import SyntheticTask, TaskData, generate
from .training import Hyper, TrainRecord, TrainResult, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ALPHALORA_EXPERT_COUNTS",
    "ActivationPolicy",
    "ActivationTrace",
    "AllocationPlan",
    "BudgetGeometry",
    "BudgetReport",
    "BudgetRow",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DEFAULT_INIT_STD",
    "ExpertAllocation",
    "ExpertLayerSite",
    "GateNetwork",
    "Hyper",
    "LoraAdapter",
    "MoaxError",
    "REFERENCE_RANK",
    "RankSchedule",
    "RunConfig",
    "ShapeError",
    "SiteSpec",
    "SyntheticTask",
    "Tape",
    "TaskData",
    "Tensor",
    "TopK",
    "TopP",
    "ToyModel",
    "ToyModelConfig",
    "TraceEntry",
    "TrainRecord",
    "TrainResult",
    "active_units_static",
    "adapter_delta",
    "backward",
    "budget_report",
    "build_model",
    "build_plan",
    "evaluate",
    "gate_probs",
    "generate",
    "init_adapter",
    "load_checkpoint",
    "load_config",
    "magnitude_histograms",
    "measure_active_units",
    "moe_forward",
    "numeric_gradient",
    "placeholder_adapter",
    "preset_plan",
    "proportion_below",
    "rank_schedule_eval",
    "record_trace",
    "relative_error",
    "renormalize",
    "resolve_allocation",
    "save_checkpoint",
    "schedule_ranks",
    "select_experts",
    "select_topk",
    "select_topp",
    "sweep_plan",
    "toy_sites",
    "train",
    "trainable_units",
    "trainable_units_exact",
]
