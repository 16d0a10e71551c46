"""Run configuration: YAML schema, validation, overrides, and plan building.

The loader keeps the source line of every mapping key so that validation
errors point at the offending line. Unknown keys are rejected rather than
ignored; a typo fails fast instead of silently training the wrong thing.

``--set section.key=value`` overrides are applied on the parsed tree before
validation, so they obey the same schema.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .allocation import (
    ALPHALORA_EXPERT_COUNTS,
    AllocationPlan,
    ExpertAllocation,
    RankSchedule,
    SiteSpec,
    resolve_allocation,
    schedule_ranks,
)
from .errors import ConfigError
from .gating import TopK, TopP
from .model import ToyModelConfig, toy_sites
from .tasks import SyntheticTask
from .training import Hyper

PRESET_STRATEGIES = (
    "vanilla",
    "mola",
    "alphalora",
    "graded-ranks",
    "mola-graded-ranks",
    "alphalora-graded-ranks",
    "adamoe",
    "graded-ranks-placeholders",
)

DEFAULT_STRATEGIES = ("vanilla", "mola", "graded-ranks", "mola-graded-ranks")

GRADED_GROUP_PATTERN = (2, 4, 6, 8)


# -- YAML with line numbers ---------------------------------------------------

class LinedDict(dict):
    """dict that remembers the source line of each key (1-based)."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.key_lines: dict[str, int] = {}


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader: _LineLoader, node, deep=False):
    loader.flatten_mapping(node)
    mapping = LinedDict()
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        value = loader.construct_object(value_node, deep=True)
        if key in mapping:
            raise ConfigError(f"duplicate key {key!r} at line {key_node.start_mark.line + 1}")
        mapping[key] = value
        if isinstance(key, str):
            mapping.key_lines[key] = key_node.start_mark.line + 1
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def load_yaml(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is None:
        return LinedDict()
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _where(d: dict, key: str) -> str:
    if isinstance(d, LinedDict) and key in d.key_lines:
        return f" (line {d.key_lines[key]})"
    return ""


class _Section:
    """View over one mapping that tracks which keys were consumed."""

    def __init__(self, data: dict, path: str) -> None:
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
        self.data = data
        self.path = path
        self.seen: set[str] = set()

    def get(self, key: str, default=None):
        self.seen.add(key)
        return self.data.get(key, default)

    def require(self, key: str):
        self.seen.add(key)
        if key not in self.data:
            raise ConfigError(f"{self.path}: missing required key {key!r}")
        return self.data[key]

    def has(self, key: str) -> bool:
        return key in self.data

    def sub(self, key: str, default=None) -> "_Section | None":
        self.seen.add(key)
        if key not in self.data:
            if default is None:
                return None
            return _Section(default, f"{self.path}.{key}")
        return _Section(self.data[key], f"{self.path}.{key}")

    def finish(self) -> None:
        extra = [k for k in self.data if k not in self.seen]
        if extra:
            k = extra[0]
            raise ConfigError(f"{self.path}: unknown key {k!r}{_where(self.data, k)}")


def _int(section: _Section, key: str, default: int) -> int:
    v = section.get(key, default)
    if not isinstance(v, int) or isinstance(v, bool):
        raise ConfigError(f"{section.path}.{key}: expected an integer, got {v!r}"
                          f"{_where(section.data, key)}")
    return v


def _float(section: _Section, key: str, default: float) -> float:
    v = section.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{section.path}.{key}: expected a number, got {v!r}"
                          f"{_where(section.data, key)}")
    return float(v)


def _str(section: _Section, key: str, default: str) -> str:
    v = section.get(key, default)
    if not isinstance(v, str):
        raise ConfigError(f"{section.path}.{key}: expected a string, got {v!r}"
                          f"{_where(section.data, key)}")
    return v


def _bool(section: _Section, key: str, default: bool) -> bool:
    v = section.get(key, default)
    if not isinstance(v, bool):
        raise ConfigError(f"{section.path}.{key}: expected a boolean, got {v!r}"
                          f"{_where(section.data, key)}")
    return v


def _int_list(section: _Section, key: str) -> list[int]:
    v = section.require(key)
    if not isinstance(v, list) or not v or any(isinstance(x, bool) or not isinstance(x, int) for x in v):
        raise ConfigError(f"{section.path}.{key}: expected a non-empty list of integers"
                          f"{_where(section.data, key)}")
    return v


# -- overrides ----------------------------------------------------------------

def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply `a.b.c=value` assignments in place; values parse as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key_path, raw = item.split("=", 1)
        keys = [k for k in key_path.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override {item!r} has an empty key path")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: bad value: {exc}") from exc
        node = cfg
        for k in keys[:-1]:
            nxt = node.get(k)
            if nxt is None:
                nxt = LinedDict()
                node[k] = nxt
            elif not isinstance(nxt, dict):
                raise ConfigError(f"override {item!r}: {k} is not a mapping")
            node = nxt
        node[keys[-1]] = value
    return cfg


# -- plan building ------------------------------------------------------------

def _build_expert_allocation(section: _Section) -> ExpertAllocation:
    strategy = _str(section, "strategy", "uniform")
    if strategy == "uniform":
        alloc = ExpertAllocation.uniform(_int(section, "count", 8))
    elif strategy == "grouped":
        alloc = ExpertAllocation.grouped(_int_list(section, "counts"))
    elif strategy == "explicit":
        alloc = ExpertAllocation.explicit(_int_list(section, "counts"),
                                          strict=_bool(section, "strict", True))
    elif strategy == "alphalora":
        alloc = ExpertAllocation.explicit(ALPHALORA_EXPERT_COUNTS,
                                          strict=_bool(section, "strict", True))
    elif strategy == "rank_scaled":
        base_sec = section.sub("base")
        if base_sec is None:
            raise ConfigError(f"{section.path}: rank_scaled needs a base allocation")
        base = _build_expert_allocation(base_sec)
        base_sec.finish()
        # ranks are attached later, once the rank schedule is resolved
        alloc = ExpertAllocation(kind="rank_scaled", base=base, ranks=None)
    else:
        raise ConfigError(f"{section.path}.strategy: unknown strategy {strategy!r}")
    section.finish()
    return alloc


def _build_ranks(section: _Section | None, n_layers: int) -> list[int]:
    if section is None:
        return [8] * n_layers
    mode = _str(section, "mode", "fixed")
    if mode == "fixed":
        rank = _int(section, "rank", 8)
        ranks = [rank] * n_layers
    elif mode == "grouped":
        groups = _int_list(section, "ranks")
        if n_layers % len(groups) != 0:
            raise ConfigError(f"{section.path}: {n_layers} layers do not divide into "
                              f"{len(groups)} rank groups")
        size = n_layers // len(groups)
        ranks = [r for r in groups for _ in range(size)]
    elif mode == "explicit":
        ranks = _int_list(section, "ranks")
        if len(ranks) != n_layers:
            raise ConfigError(f"{section.path}: expected {n_layers} ranks, got {len(ranks)}")
    elif mode == "formula":
        schedule = RankSchedule(
            r_min=_int(section, "r_min", 2),
            r_max=_int(section, "r_max", 8),
            n_layers=n_layers,
            group_size=_int(section, "group_size", 1),
            snap_mode=_str(section, "snap", "verbatim"),
        )
        ranks = schedule_ranks(schedule)
    else:
        raise ConfigError(f"{section.path}.mode: unknown rank mode {mode!r}")
    section.finish()
    if any(r < 1 for r in ranks):
        raise ConfigError(f"{section.path}: ranks must be >= 1")
    return ranks


def _build_policy(section: _Section | None):
    if section is None:
        return TopK(k=2)
    kind = _str(section, "kind", "topk")
    if kind == "topk":
        policy = TopK(k=_int(section, "k", 2))
    elif kind == "topp":
        policy = TopP(threshold=_float(section, "threshold", 0.6))
    else:
        raise ConfigError(f"{section.path}.kind: unknown activation kind {kind!r}")
    section.finish()
    return policy


def build_plan(plan_data: dict, n_layers: int, sites: tuple[SiteSpec, ...],
               default_name: str = "plan") -> AllocationPlan:
    """Resolve a plan mapping against a geometry into an AllocationPlan.

    The sibling key ``renorm_true_only`` is model routing behavior, consumed
    by :func:`parse_config`; it is accepted (and ignored) here so the same
    mapping validates in both contexts.
    """
    section = _Section(plan_data, "plan")
    section.get("renorm_true_only")  # consumed by parse_config
    name = _str(section, "name", default_name)

    ranks = _build_ranks(section.sub("ranks"), n_layers)

    experts_sec = section.sub("experts", default=LinedDict())
    alloc = _build_expert_allocation(experts_sec)
    if alloc.kind == "rank_scaled":
        alloc = ExpertAllocation(kind="rank_scaled", base=alloc.base, ranks=tuple(ranks))
    counts = resolve_allocation(alloc, n_layers)

    ph = section.get("placeholders", 0)
    if isinstance(ph, bool) or not isinstance(ph, (int, list)):
        raise ConfigError(f"plan.placeholders: expected an integer or per-layer list, got {ph!r}")
    if isinstance(ph, int):
        placeholders = [ph] * n_layers
    else:
        if len(ph) != n_layers or any(isinstance(x, bool) or not isinstance(x, int) for x in ph):
            raise ConfigError(f"plan.placeholders: expected {n_layers} integers")
        placeholders = list(ph)

    policy = _build_policy(section.sub("activation"))
    section.finish()

    return AllocationPlan(
        name=name,
        n_layers=n_layers,
        expert_counts=tuple(counts),
        ranks=tuple(ranks),
        placeholder_counts=tuple(placeholders),
        policy=policy,
        sites=sites,
    )


# -- budget geometry and presets ----------------------------------------------

@dataclass(frozen=True)
class BudgetGeometry:
    n_layers: int = 32
    experts: int = 8
    rank: int = 8
    k: int = 2
    alphalora_strict: bool = True
    sites: tuple[SiteSpec, ...] = ()

    def __post_init__(self) -> None:
        if self.n_layers < 1 or self.experts < 1 or self.rank < 1 or self.k < 1:
            raise ConfigError("budget geometry values must be positive")


def _graded_ranks(n_layers: int) -> list[int]:
    pattern = GRADED_GROUP_PATTERN
    if n_layers % len(pattern) != 0:
        raise ConfigError(f"graded ranks need a layer count divisible by {len(pattern)}, "
                          f"got {n_layers}")
    size = n_layers // len(pattern)
    return [r for r in pattern for _ in range(size)]


def preset_plan(strategy: str, budget: BudgetGeometry, *, lenient_alpha: bool = False) -> AllocationPlan:
    """Named allocation strategies resolved against the budget geometry."""
    n = budget.n_layers
    policy = TopK(k=budget.k)
    fixed = [budget.rank] * n
    strict = budget.alphalora_strict and not lenient_alpha

    if strategy == "vanilla":
        counts, ranks, ph = [budget.experts] * n, fixed, [0] * n
    elif strategy == "mola":
        counts = resolve_allocation(ExpertAllocation.grouped(GRADED_GROUP_PATTERN), n)
        ranks, ph = fixed, [0] * n
    elif strategy == "alphalora":
        counts = resolve_allocation(
            ExpertAllocation.explicit(ALPHALORA_EXPERT_COUNTS, strict=strict), n)
        ranks, ph = fixed, [0] * n
    elif strategy == "graded-ranks":
        counts, ranks, ph = [budget.experts] * n, _graded_ranks(n), [0] * n
    elif strategy == "mola-graded-ranks":
        counts = resolve_allocation(ExpertAllocation.grouped(GRADED_GROUP_PATTERN), n)
        ranks, ph = _graded_ranks(n), [0] * n
    elif strategy == "alphalora-graded-ranks":
        ranks = _graded_ranks(n)
        base = ExpertAllocation.explicit(ALPHALORA_EXPERT_COUNTS, strict=strict)
        counts = resolve_allocation(ExpertAllocation.rank_scaled(base, ranks), n)
        ph = [0] * n
    elif strategy == "adamoe":
        counts, ranks = [budget.experts] * n, fixed
        ph = [budget.experts] * n  # one placeholder per true expert
    elif strategy == "graded-ranks-placeholders":
        counts, ranks = [budget.experts] * n, _graded_ranks(n)
        ph = [budget.experts] * n
    else:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {PRESET_STRATEGIES}")

    return AllocationPlan(
        name=strategy,
        n_layers=n,
        expert_counts=tuple(counts),
        ranks=tuple(ranks),
        placeholder_counts=tuple(ph),
        policy=policy,
        sites=budget.sites,
    )


def sweep_plan(digits: str, budget: BudgetGeometry) -> AllocationPlan:
    """A rank sweep entry like "2448": one rank digit per equal layer group."""
    if not digits.isdigit() or not digits:
        raise ConfigError(f"sweep entry {digits!r} must be a string of rank digits")
    pattern = [int(c) for c in digits]
    if any(r < 1 for r in pattern):
        raise ConfigError(f"sweep entry {digits!r} contains a zero rank")
    n = budget.n_layers
    if n % len(pattern) != 0:
        raise ConfigError(f"sweep entry {digits!r} needs a layer count divisible by {len(pattern)}")
    size = n // len(pattern)
    ranks = [r for r in pattern for _ in range(size)]
    return AllocationPlan(
        name=f"ranks-{digits}",
        n_layers=n,
        expert_counts=tuple([budget.experts] * n),
        ranks=tuple(ranks),
        placeholder_counts=tuple([0] * n),
        policy=TopK(k=budget.k),
        sites=budget.sites,
    )


# -- full run config ----------------------------------------------------------

@dataclass
class RunConfig:
    name: str
    model: ToyModelConfig  # plan attached
    task: SyntheticTask
    hyper: Hyper
    train_seed: int
    budget: BudgetGeometry
    output_root: str | None


def parse_config(data: dict, *, default_name: str = "run") -> RunConfig:
    """Validate a parsed YAML tree and build the typed run configuration."""
    top = _Section(data, "config")
    name = _str(top, "name", default_name)

    model_sec = top.sub("model", default=LinedDict())
    model_kwargs = dict(
        n_layers=_int(model_sec, "n_layers", 8),
        d_model=_int(model_sec, "d_model", 32),
        d_ff=_int(model_sec, "d_ff", 64),
        n_heads=_int(model_sec, "n_heads", 2),
        vocab_size=_int(model_sec, "vocab_size", 64),
        seq_len=_int(model_sec, "seq_len", 16),
        adapter_sites=_str(model_sec, "adapter_sites", "ffn"),
        nonlinearity=_str(model_sec, "nonlinearity", "tanh"),
        base_std=_float(model_sec, "base_std", 0.05),
        adapter_std=_float(model_sec, "adapter_std", 0.02),
    )
    model_sec.finish()
    bare = ToyModelConfig(**model_kwargs)
    sites = toy_sites(bare)

    plan_data = top.get("plan", LinedDict())
    if not isinstance(plan_data, dict):
        raise ConfigError("config.plan: expected a mapping")
    renorm_true_only = plan_data.get("renorm_true_only", False)
    if not isinstance(renorm_true_only, bool):
        raise ConfigError(f"config.plan.renorm_true_only: expected a boolean, got {renorm_true_only!r}")
    plan = build_plan(plan_data, bare.n_layers, sites, default_name=f"{name}-plan")
    model_cfg = ToyModelConfig(**model_kwargs, plan=plan, renorm_true_only=renorm_true_only)

    task_sec = top.sub("task", default=LinedDict())
    task = SyntheticTask(
        kind=_str(task_sec, "kind", "token-copy"),
        seed=_int(task_sec, "seed", 7),
        n_train=_int(task_sec, "n_train", 512),
        n_eval=_int(task_sec, "n_eval", 256),
        seq_len=bare.seq_len,
        vocab_size=bare.vocab_size,
    )
    task_sec.finish()

    train_sec = top.sub("train", default=LinedDict())
    train_seed = _int(train_sec, "seed", 11)
    hyper = Hyper(
        lr=_float(train_sec, "lr", 0.5),
        steps=_int(train_sec, "steps", 2000),
        batch_size=_int(train_sec, "batch_size", 8),
        momentum=_float(train_sec, "momentum", 0.9),
        count_penalty=_float(train_sec, "count_penalty", 0.0),
        load_balance=_float(train_sec, "load_balance", 0.0),
        eval_every=_int(train_sec, "eval_every", 0),
    )
    train_sec.finish()

    budget_sec = top.sub("budget", default=LinedDict())
    budget = BudgetGeometry(
        n_layers=_int(budget_sec, "n_layers", 32),
        experts=_int(budget_sec, "experts", 8),
        rank=_int(budget_sec, "rank", 8),
        k=_int(budget_sec, "k", 2),
        alphalora_strict=_bool(budget_sec, "alphalora_strict", True),
        sites=sites,
    )
    budget_sec.finish()

    output_sec = top.sub("output", default=LinedDict())
    root = output_sec.get("root")
    if root is not None and not isinstance(root, str):
        raise ConfigError(f"config.output.root: expected a string, got {root!r}")
    output_sec.finish()

    top.finish()
    return RunConfig(
        name=name,
        model=model_cfg,
        task=task,
        hyper=hyper,
        train_seed=train_seed,
        budget=budget,
        output_root=root,
    )


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    data = load_yaml(path)
    if overrides:
        apply_overrides(data, overrides)
    return parse_config(data, default_name=Path(path).stem)
