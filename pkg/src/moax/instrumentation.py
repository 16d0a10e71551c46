"""Routing and magnitude instrumentation over a forward pass.

A trace holds one entry per (token, layer, site): which experts the router
selected, their renormalized weights, and L-infinity summaries of the base
path and the combined (post-weighting) adapter path. Alongside the entries
the trace pools the elementwise output magnitudes |value| of both paths per
layer; the below-threshold proportions and the magnitude histograms are
computed over those element pools, not over the per-entry summaries.

Traces observe values only; recording never perturbs the computation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .allocation import REFERENCE_RANK, AllocationPlan
from .autodiff import Tape
from .errors import ConfigError
from .model import ToyModel

DEFAULT_THRESHOLD = 1e-3
HIST_LO = 1e-8
HIST_HI = 1e2
HIST_BINS = 50

SOURCES = ("base", "adapter")


@dataclass(frozen=True)
class TraceEntry:
    token: int
    layer: int  # 1-based
    site: str
    selected: tuple[int, ...]  # ascending expert indices
    weights: tuple[float, ...]  # renormalized, aligned with selected
    placeholder: tuple[bool, ...]  # aligned with selected
    base_out_linf: float
    adapter_out_linf: float  # combined weighted adapter path
    delta_linf: tuple[float, ...]  # per selected expert, weighted; placeholders are 0

    def to_json_dict(self) -> dict:
        return {
            "token": self.token,
            "layer": self.layer,
            "site": self.site,
            "selected": list(self.selected),
            "weights": list(self.weights),
            "placeholder": list(self.placeholder),
            "base_out_linf": self.base_out_linf,
            "adapter_out_linf": self.adapter_out_linf,
            "delta_linf": list(self.delta_linf),
        }


@dataclass
class ActivationTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    # per-layer pools of elementwise |value| over every recorded output,
    # keyed by layer then source ("base" or "adapter")
    element_values: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    def layers(self) -> list[int]:
        return sorted({e.layer for e in self.entries})

    def at_layer(self, layer: int) -> list[TraceEntry]:
        rows = [e for e in self.entries if e.layer == layer]
        if not rows:
            raise KeyError(f"layer {layer} not present in trace (layers: {self.layers()})")
        return rows

    def elements(self, layer: int, source: str) -> np.ndarray:
        if source not in SOURCES:
            raise KeyError(f"unknown source {source!r} (expected one of {SOURCES})")
        if layer not in self.element_values:
            raise KeyError(f"layer {layer} not present in trace (layers: {self.layers()})")
        return self.element_values[layer][source]


class TraceCollector:
    """Accumulates site observations during a forward pass."""

    def __init__(self) -> None:
        self.entries: list[TraceEntry] = []
        self._pools: dict[tuple[int, str], list[np.ndarray]] = {}

    def record_site(self, *, layer: int, site: str, experts, selected, weights,
                    base_out, adapter_out, per_expert_scaled) -> None:
        self._pools.setdefault((layer, "base"), []).append(np.abs(base_out).ravel())
        self._pools.setdefault((layer, "adapter"), []).append(np.abs(adapter_out).ravel())
        n_tokens = base_out.shape[0]
        for t in range(n_tokens):
            sel = sorted(int(j) for j in selected[t])
            deltas = []
            for j in sel:
                scaled = per_expert_scaled.get(j)
                deltas.append(0.0 if scaled is None else float(np.max(np.abs(scaled[t]))))
            self.entries.append(TraceEntry(
                token=t,
                layer=layer,
                site=site,
                selected=tuple(sel),
                weights=tuple(float(weights[t, j]) for j in sel),
                placeholder=tuple(bool(experts[j].is_placeholder) for j in sel),
                base_out_linf=float(np.max(np.abs(base_out[t]))),
                adapter_out_linf=float(np.max(np.abs(adapter_out[t]))),
                delta_linf=tuple(deltas),
            ))

    def finish(self, meta: dict | None = None, element_sample: int | None = None,
               sample_seed: int = 0) -> ActivationTrace:
        entries = sorted(self.entries, key=lambda e: (e.token, e.layer, e.site))
        pools: dict[int, dict[str, np.ndarray]] = {}
        for (layer, source), chunks in sorted(self._pools.items()):
            vals = np.concatenate(chunks) if chunks else np.zeros(0)
            if element_sample is not None and vals.size > element_sample:
                # keep a seeded subsample in recording order for large runs
                rng = np.random.Generator(np.random.PCG64(
                    np.random.SeedSequence((sample_seed, layer, SOURCES.index(source)))))
                keep = np.sort(rng.choice(vals.size, element_sample, replace=False))
                vals = vals[keep]
            pools.setdefault(layer, {})[source] = vals
        return ActivationTrace(entries=entries, meta=meta or {}, element_values=pools)


def record_trace(model: ToyModel, xs: np.ndarray, element_sample: int | None = None,
                 sample_seed: int = 0) -> ActivationTrace:
    """Forward pass over xs [batch, seq_len] with tracing; the model is
    read-only and the pass carries no loss or gradients.

    element_sample caps the per-layer, per-source element pools at a seeded
    subsample; the default records every element of every token.
    """
    collector = TraceCollector()
    tape = Tape()
    model.forward_logits(tape, xs, collector=collector)
    batch = int(np.asarray(xs).shape[0])
    meta = {
        "plan": model.plan.name,
        "n_layers": model.cfg.n_layers,
        "batch": batch,
        "seq_len": model.cfg.seq_len,
        "tokens": batch * model.cfg.seq_len,
    }
    return collector.finish(meta, element_sample=element_sample, sample_seed=sample_seed)


# -- reductions --------------------------------------------------------------

def proportion_below(trace: ActivationTrace, layer: int, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Fraction of the layer's recorded adapter-output element magnitudes
    strictly below the threshold. KeyError for layers not in the trace."""
    vals = trace.elements(layer, "adapter")
    if vals.size == 0:
        raise ConfigError(f"layer {layer} has no recorded adapter elements")
    return float(np.mean(vals < threshold))


def measure_active_units(trace: ActivationTrace, plan: AllocationPlan,
                         baseline_active: float = 2.0) -> float:
    """Mean activated adapter capacity per entry, in the same units as
    :func:`moax.allocation.active_units_static`.

    Each entry contributes sum(rank / REFERENCE_RANK) over its selected true
    experts; placeholders add nothing. Without placeholders and with a top-k
    policy this equals the static bound exactly (the per-entry terms are
    dyadic rationals, so the float sums incur no rounding).
    """
    if not trace.entries:
        raise ConfigError("cannot measure active units on an empty trace")
    total = 0.0
    for e in trace.entries:
        if not (1 <= e.layer <= plan.n_layers):
            raise ConfigError(f"trace entry layer {e.layer} outside plan with {plan.n_layers} layers")
        rank = plan.ranks[e.layer - 1]
        limit = plan.total_experts(e.layer)
        for j, is_ph in zip(e.selected, e.placeholder):
            if j >= limit:
                raise ConfigError(f"trace entry selects expert {j} but layer {e.layer} has {limit}")
            if not is_ph:
                total += rank / REFERENCE_RANK
    return (total / len(trace.entries)) * (baseline_active / 2.0)


@dataclass(frozen=True)
class Histogram:
    layer: int
    source: str  # "base" or "adapter"
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    cumulative: tuple[float, ...]  # fraction of values at or below each bin's right edge


def magnitude_histograms(trace: ActivationTrace, bins: int = HIST_BINS,
                         lo: float = HIST_LO, hi: float = HIST_HI) -> list[Histogram]:
    """Log-spaced histograms of the elementwise |value| pools, one per layer
    and source. Values are clipped into [lo, hi] so counts always sum to the
    number of recorded elements and the cumulative column ends at exactly 1.0."""
    if bins < 1 or lo <= 0 or hi <= lo:
        raise ConfigError(f"bad histogram geometry: bins={bins} lo={lo} hi={hi}")
    edges = np.logspace(np.log10(lo), np.log10(hi), bins + 1)
    out: list[Histogram] = []
    for layer in trace.layers():
        for source in SOURCES:
            values = trace.elements(layer, source)
            clipped = np.clip(values, edges[0], edges[-1])
            counts, _ = np.histogram(clipped, edges)
            csum = np.cumsum(counts) / values.size
            out.append(Histogram(
                layer=layer,
                source=source,
                edges=tuple(float(v) for v in edges),
                counts=tuple(int(c) for c in counts),
                cumulative=tuple(float(v) for v in csum),
            ))
    return out


# -- serialization -----------------------------------------------------------

def write_trace_jsonl(trace: ActivationTrace, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"meta": trace.meta}, sort_keys=True) + "\n")
        for e in trace.entries:
            fh.write(json.dumps(e.to_json_dict(), sort_keys=True) + "\n")
        for layer in sorted(trace.element_values):
            for source in SOURCES:
                rec = {"elements": {"layer": layer, "source": source,
                                    "values": [float(v) for v in trace.element_values[layer][source]]}}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace_jsonl(path) -> ActivationTrace:
    entries: list[TraceEntry] = []
    meta: dict = {}
    pools: dict[int, dict[str, np.ndarray]] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if "meta" in d and "token" not in d:
                meta = d["meta"]
                continue
            if "elements" in d and "token" not in d:
                el = d["elements"]
                pools.setdefault(int(el["layer"]), {})[el["source"]] = np.asarray(
                    [float(v) for v in el["values"]])
                continue
            entries.append(TraceEntry(
                token=int(d["token"]),
                layer=int(d["layer"]),
                site=d["site"],
                selected=tuple(int(v) for v in d["selected"]),
                weights=tuple(float(v) for v in d["weights"]),
                placeholder=tuple(bool(v) for v in d["placeholder"]),
                base_out_linf=float(d["base_out_linf"]),
                adapter_out_linf=float(d["adapter_out_linf"]),
                delta_linf=tuple(float(v) for v in d["delta_linf"]),
            ))
    return ActivationTrace(entries=entries, meta=meta, element_values=pools)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_proportions_csv(trace: ActivationTrace, path,
                          thresholds: tuple[float, ...] = (DEFAULT_THRESHOLD,)) -> None:
    with open(path, "w") as fh:
        fh.write("layer,threshold,proportion_below\n")
        for layer in trace.layers():
            for thr in thresholds:
                fh.write(f"{layer},{_fmt(thr)},{_fmt(proportion_below(trace, layer, thr))}\n")


def write_histograms_csv(hists: list[Histogram], path) -> None:
    with open(path, "w") as fh:
        fh.write("layer,source,bin_left,bin_right,count,cumulative\n")
        for h in hists:
            for i, count in enumerate(h.counts):
                fh.write(
                    f"{h.layer},{h.source},{_fmt(h.edges[i])},{_fmt(h.edges[i + 1])},"
                    f"{count},{_fmt(h.cumulative[i])}\n"
                )


def write_active_units_csv(path, plan_name: str, measured: float,
                           static: float | None) -> None:
    with open(path, "w") as fh:
        fh.write("plan,measured_active_units,static_active_units,within_bound\n")
        if static is None:
            fh.write(f"{plan_name},{_fmt(measured)},,\n")
        else:
            fh.write(f"{plan_name},{_fmt(measured)},{_fmt(static)},{str(measured <= static).lower()}\n")
