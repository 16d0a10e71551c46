"""Layer-wise expert-count and rank-schedule strategies with exact budgets.

Two knobs are configured per layer: how many adapter experts a layer gets
and what rank those adapters use. Budgets are reported in normalized units:
the reference plan (uniform experts at the reference rank, top-2) defines
trainable units = 1 and active units = 2, and every other plan is the exact
ratio of its adapter parameter count (or per-token activated rank mass)
to the reference's. Gate parameters are excluded from the units -- the
normalized ratios are adapter-only by convention -- and are reported as a
separate raw column.

All functions here are pure over immutable plans.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import ConfigError
from .gating import ActivationPolicy, TopK, TopP

__all__ = [
    "RankSchedule",
    "ExpertAllocation",
    "SiteSpec",
    "AllocationPlan",
    "BudgetRow",
    "BudgetReport",
    "ALPHALORA_EXPERT_COUNTS",
    "REFERENCE_RANK",
    "rank_schedule_eval",
    "schedule_ranks",
    "resolve_allocation",
    "trainable_units",
    "trainable_units_exact",
    "active_units_static",
    "budget_report",
]

# Published per-layer expert counts from the training-quality-based allocator
# (AlphaLoRA), stored verbatim: 37 entries as shipped upstream, even though the
# 32-layer base model leaves the layer mapping unstated.
ALPHALORA_EXPERT_COUNTS: tuple[int, ...] = (
    1, 3, 4, 4, 4, 4, 4, 3, 3, 3, 3, 3, 2, 2, 3, 3, 3, 3, 3, 4,
    4, 5, 5, 7, 6, 8, 9, 8, 7, 8, 6, 6, 8, 7, 7, 9, 5,
)

REFERENCE_RANK = 8  # rank that defines one unit of per-expert capacity

_SNAP_MODES = ("verbatim", "multiples_of_2", "powers_of_2", "explicit")


@dataclass(frozen=True)
class RankSchedule:
    """Rank assignment r_i = r_min + floor((r_max-r_min)/ceil(n/l)) * floor((i-1)/l).

    snap_mode post-processes the verbatim value: "multiples_of_2" rounds up
    to the next even number, "powers_of_2" rounds to the nearest power of
    two with ties up, and "explicit" overrides the formula with a literal
    per-layer list.
    """

    r_min: int
    r_max: int
    n_layers: int
    group_size: int
    snap_mode: str = "verbatim"
    explicit: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.r_min < 1 or self.r_max < 1:
            raise ConfigError("ranks must be positive")
        if self.r_min > self.r_max:
            raise ConfigError(f"r_min {self.r_min} exceeds r_max {self.r_max}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be positive")
        if not (1 <= self.group_size <= self.n_layers):
            raise ConfigError(f"group size {self.group_size} out of range for {self.n_layers} layers")
        if self.snap_mode not in _SNAP_MODES:
            raise ConfigError(f"unknown snap mode {self.snap_mode!r}; expected one of {_SNAP_MODES}")
        if self.snap_mode == "explicit":
            if self.explicit is None or len(self.explicit) != self.n_layers:
                raise ConfigError("explicit snap mode requires one rank per layer")
            if any(r < 1 for r in self.explicit):
                raise ConfigError("explicit ranks must be >= 1")
        elif self.explicit is not None:
            raise ConfigError("explicit rank list is only valid with snap_mode='explicit'")


def _round_up_to_even(v: int) -> int:
    return v if v % 2 == 0 else v + 1


def _nearest_power_of_two(v: int) -> int:
    if v < 1:
        raise ConfigError(f"cannot snap {v} to a power of two")
    lower = 1 << (v.bit_length() - 1)
    if lower == v:
        return v
    upper = lower << 1
    # ties round up
    return lower if (v - lower) < (upper - v) else upper


def rank_schedule_eval(s: RankSchedule, i: int) -> int:
    """Rank for 1-based layer index i: verbatim formula, then snap."""
    if not (1 <= i <= s.n_layers):
        raise ConfigError(f"layer index {i} out of range 1..{s.n_layers}")
    if s.snap_mode == "explicit":
        return s.explicit[i - 1]  # type: ignore[index]
    n_groups = -(-s.n_layers // s.group_size)  # ceil(n/l)
    step = (s.r_max - s.r_min) // n_groups
    rank = s.r_min + step * ((i - 1) // s.group_size)
    if s.snap_mode == "multiples_of_2":
        rank = _round_up_to_even(rank)
    elif s.snap_mode == "powers_of_2":
        rank = _nearest_power_of_two(rank)
    return rank


def schedule_ranks(s: RankSchedule) -> list[int]:
    return [rank_schedule_eval(s, i) for i in range(1, s.n_layers + 1)]


@dataclass(frozen=True)
class ExpertAllocation:
    """Per-layer expert-count strategy.

    kind is one of:
      uniform      -- `count` experts everywhere
      grouped      -- `group_counts` spread over equal consecutive layer groups
      explicit     -- `layer_counts` taken verbatim (strict length check by default)
      rank_scaled  -- round(rank_i / REFERENCE_RANK * base_i), clamped to >= 1
    """

    kind: str
    count: int | None = None
    group_counts: tuple[int, ...] | None = None
    layer_counts: tuple[int, ...] | None = None
    base: "ExpertAllocation | None" = None
    ranks: tuple[int, ...] | None = None
    strict: bool = True

    @staticmethod
    def uniform(count: int) -> "ExpertAllocation":
        return ExpertAllocation(kind="uniform", count=count)

    @staticmethod
    def grouped(group_counts: Sequence[int]) -> "ExpertAllocation":
        return ExpertAllocation(kind="grouped", group_counts=tuple(group_counts))

    @staticmethod
    def explicit(layer_counts: Sequence[int], strict: bool = True) -> "ExpertAllocation":
        return ExpertAllocation(kind="explicit", layer_counts=tuple(layer_counts), strict=strict)

    @staticmethod
    def rank_scaled(base: "ExpertAllocation", ranks: Sequence[int]) -> "ExpertAllocation":
        return ExpertAllocation(kind="rank_scaled", base=base, ranks=tuple(ranks))


def _round_half_up(x: Fraction) -> int:
    return int(x + Fraction(1, 2)) if x >= 0 else -int(-x + Fraction(1, 2))


def resolve_allocation(a: ExpertAllocation, n_layers: int) -> list[int]:
    """Resolve a strategy to one expert count per layer (each >= 1)."""
    if n_layers < 1:
        raise ConfigError("n_layers must be positive")
    if a.kind == "uniform":
        if a.count is None or a.count < 1:
            raise ConfigError("uniform allocation needs a positive expert count")
        return [a.count] * n_layers
    if a.kind == "grouped":
        groups = a.group_counts
        if not groups:
            raise ConfigError("grouped allocation needs a non-empty group list")
        if n_layers % len(groups) != 0:
            raise ConfigError(f"{n_layers} layers do not divide into {len(groups)} equal groups")
        size = n_layers // len(groups)
        counts = [c for c in groups for _ in range(size)]
        if any(c < 1 for c in counts):
            raise ConfigError("grouped counts must be >= 1")
        return counts
    if a.kind == "explicit":
        counts = a.layer_counts
        if counts is None:
            raise ConfigError("explicit allocation needs a per-layer list")
        if len(counts) != n_layers:
            if a.strict or len(counts) < n_layers:
                raise ConfigError(
                    f"explicit allocation lists {len(counts)} layers but the model has {n_layers}"
                )
            counts = counts[:n_layers]  # lenient: take the first n_layers entries
        if any(c < 1 for c in counts):
            raise ConfigError("explicit counts must be >= 1")
        return list(counts)
    if a.kind == "rank_scaled":
        if a.base is None or a.ranks is None:
            raise ConfigError("rank_scaled allocation needs a base allocation and a rank list")
        if len(a.ranks) != n_layers:
            raise ConfigError(f"rank_scaled rank list has {len(a.ranks)} entries for {n_layers} layers")
        base_counts = resolve_allocation(a.base, n_layers)
        counts = []
        for rank, base_count in zip(a.ranks, base_counts):
            scaled = _round_half_up(Fraction(rank, REFERENCE_RANK) * base_count)
            counts.append(max(1, scaled))
        return counts
    raise ConfigError(f"unknown allocation strategy {a.kind!r}")


@dataclass(frozen=True)
class SiteSpec:
    """One adapter site per layer: a named n x m weight matrix."""

    name: str
    n: int
    m: int

    def __post_init__(self) -> None:
        if self.n < 1 or self.m < 1:
            raise ConfigError(f"site {self.name}: dimensions must be positive")


@dataclass(frozen=True)
class AllocationPlan:
    """Fully resolved plan: per-layer true-expert counts, ranks, placeholder
    counts, the activation policy, and the adapter sites every layer carries.
    """

    name: str
    n_layers: int
    expert_counts: tuple[int, ...]
    ranks: tuple[int, ...]
    placeholder_counts: tuple[int, ...]
    policy: ActivationPolicy
    sites: tuple[SiteSpec, ...]

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("plan needs at least one layer")
        for label, seq in (
            ("expert_counts", self.expert_counts),
            ("ranks", self.ranks),
            ("placeholder_counts", self.placeholder_counts),
        ):
            if len(seq) != self.n_layers:
                raise ConfigError(f"plan {self.name}: {label} has {len(seq)} entries for {self.n_layers} layers")
        if any(c < 1 for c in self.expert_counts):
            raise ConfigError(f"plan {self.name}: every layer needs at least one true expert")
        if any(r < 1 for r in self.ranks):
            raise ConfigError(f"plan {self.name}: ranks must be >= 1")
        if any(p < 0 for p in self.placeholder_counts):
            raise ConfigError(f"plan {self.name}: placeholder counts must be >= 0")
        if not self.sites:
            raise ConfigError(f"plan {self.name}: needs at least one adapter site")
        for site in self.sites:
            for layer, r in enumerate(self.ranks, start=1):
                if r > min(site.n, site.m):
                    raise ConfigError(
                        f"plan {self.name}: rank {r} at layer {layer} exceeds min dim of site {site.name}"
                    )

    def supports_static_active(self) -> bool:
        """True when the policy is top-k and every layer can fill the full
        selection, the precondition for a static activation bound."""
        if not isinstance(self.policy, TopK):
            return False
        return all(self.policy.k <= self.total_experts(l) for l in range(1, self.n_layers + 1))

    def total_experts(self, layer: int) -> int:
        """Selectable experts (true + placeholder) at 1-based layer."""
        return self.expert_counts[layer - 1] + self.placeholder_counts[layer - 1]

    def adapter_param_count(self) -> int:
        """Raw trainable adapter parameters; placeholders contribute 0."""
        per_layer_site = sum(s.n + s.m for s in self.sites)
        return sum(c * r for c, r in zip(self.expert_counts, self.ranks)) * per_layer_site

    def gate_param_count(self) -> int:
        """Raw gate parameters: one E x m linear map per site per layer."""
        total = 0
        for c, p in zip(self.expert_counts, self.placeholder_counts):
            total += (c + p) * sum(s.m for s in self.sites)
        return total


def _check_same_geometry(plan: AllocationPlan, baseline: AllocationPlan) -> None:
    if plan.n_layers != baseline.n_layers or plan.sites != baseline.sites:
        raise ConfigError(
            f"plan {plan.name} and baseline {baseline.name} must share layer count and site dimensions"
        )


def trainable_units_exact(plan: AllocationPlan, baseline: AllocationPlan) -> Fraction:
    """Exact adapter-parameter ratio plan/baseline as a rational number."""
    _check_same_geometry(plan, baseline)
    return Fraction(plan.adapter_param_count(), baseline.adapter_param_count())


def trainable_units(plan: AllocationPlan, baseline: AllocationPlan) -> float:
    return float(trainable_units_exact(plan, baseline))


def active_units_static(plan: AllocationPlan, k: int | None = None, baseline_active: float = 2.0) -> float:
    """Static per-token activation bound: mean over layers of k * rank / REFERENCE_RANK.

    Normalized so the reference plan (rank 8 everywhere, top-2) yields 2.0.
    For plans with placeholders this is an upper bound on the measured value.
    """
    if k is None:
        if not isinstance(plan.policy, TopK):
            raise ConfigError(f"plan {plan.name}: static active units require a top-k policy")
        k = plan.policy.k
    if k < 1:
        raise ConfigError("k must be positive")
    for layer in range(1, plan.n_layers + 1):
        if k > plan.total_experts(layer):
            raise ConfigError(f"plan {plan.name}: k={k} exceeds expert count at layer {layer}")
    per_layer = [k * r / REFERENCE_RANK for r in plan.ranks]
    return (sum(per_layer) / plan.n_layers) * (baseline_active / 2.0)


@dataclass(frozen=True)
class BudgetRow:
    name: str
    trainable_units: float
    active_units: float | None
    active_mode: str  # "static" for top-k plans, "measured" otherwise
    adapter_params: int
    gate_params: int
    trainable_params: int
    notes: str = ""


@dataclass(frozen=True)
class BudgetReport:
    baseline_name: str
    rows: tuple[BudgetRow, ...]


def _counts_only(plan: AllocationPlan, baseline: AllocationPlan) -> AllocationPlan:
    return replace(plan, name=plan.name + "[counts-only]", ranks=baseline.ranks)


def _ranks_only(plan: AllocationPlan, baseline: AllocationPlan) -> AllocationPlan:
    return replace(plan, name=plan.name + "[ranks-only]", expert_counts=baseline.expert_counts)


def _approximation_note(plan: AllocationPlan, baseline: AllocationPlan) -> str:
    """Annotate plans where counts and ranks both vary: the count-only and
    rank-only unit factors multiply to an approximation that differs from
    the exact joint count."""
    exact = trainable_units_exact(plan, baseline)
    count_factor = trainable_units_exact(_counts_only(plan, baseline), baseline)
    rank_factor = trainable_units_exact(_ranks_only(plan, baseline), baseline)
    approx = count_factor * rank_factor
    if approx == exact:
        return ""
    return (
        f"count x rank factoring {float(count_factor):g} x {float(rank_factor):g} = {float(approx):g} "
        f"(approximation, commonly rounded to {float(approx):.2f}); exact joint count is {float(exact):g}"
    )


def budget_report(plans: Iterable[AllocationPlan], baseline: AllocationPlan) -> BudgetReport:
    """One row per plan, normalized against the baseline.

    Active units carry the static top-k bound where the policy is top-k and
    are marked "measured" (value absent) otherwise -- learned activation can
    only be accounted from a recorded trace.
    """
    rows = []
    for plan in plans:
        _check_same_geometry(plan, baseline)
        if plan.supports_static_active():
            active: float | None = active_units_static(plan)
            mode = "static"
        else:
            # top-p plans, and top-k plans where some layer cannot fill the
            # selection, have no static bound; only a trace can account them
            active = None
            mode = "measured"
        adapter_params = plan.adapter_param_count()
        gate_params = plan.gate_param_count()
        rows.append(
            BudgetRow(
                name=plan.name,
                trainable_units=trainable_units(plan, baseline),
                active_units=active,
                active_mode=mode,
                adapter_params=adapter_params,
                gate_params=gate_params,
                trainable_params=adapter_params + gate_params,
                notes=_approximation_note(plan, baseline),
            )
        )
    return BudgetReport(baseline_name=baseline.name, rows=tuple(rows))
