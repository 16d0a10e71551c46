"""Per-site gate networks and the mixture-of-adapter-experts forward rule.

A site is one frozen weight matrix plus its expert adapters and a linear
gate (no bias, no hidden layer). Routing is per token: the gate maps the
token to a probability vector over experts, an activation policy picks a
subset, and the selected probabilities are renormalized to weight the
expert deltas. Placeholder experts may be selected; they contribute zero
output and, by default, keep their share of the renormalization mass, so
a top-K router effectively activates fewer true experts.

Routing is stateless given frozen parameters, so tokens may be processed
in any order or in parallel; trace entries carry sort keys for stable
persistence (see the instrumentation module).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import LoraAdapter, adapter_delta
from .autodiff import softmax
from .errors import ConfigError, ContractError, ShapeError

__all__ = [
    "TopK",
    "TopP",
    "GateNetwork",
    "ExpertLayerSite",
    "gate_probs",
    "select_topk",
    "select_topp",
    "select_experts",
    "select_topk_batch",
    "renormalize",
    "moe_forward",
    "true_selected_count",
]


@dataclass(frozen=True)
class TopK:
    """Activate the k highest-probability experts (ties toward lower index)."""

    k: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"top-k requires k >= 1, got {self.k}")


@dataclass(frozen=True)
class TopP:
    """Activate experts in decreasing probability until the cumulative mass
    reaches the threshold (inclusive)."""

    threshold: float

    def __post_init__(self) -> None:
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError(f"top-p threshold must lie in (0, 1), got {self.threshold}")


ActivationPolicy = TopK | TopP


@dataclass
class GateNetwork:
    """Linear gate: weight is E x d, probabilities are softmax(weight @ x)."""

    weight: np.ndarray

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]


@dataclass
class ExpertLayerSite:
    """A frozen base weight with its adapter experts, gate, and policy.

    base_weight never receives gradients. renorm_true_only switches the
    contested placeholder behavior: when True, renormalization runs over
    the selected true experts only instead of the full selected set.
    """

    base_weight: np.ndarray
    experts: list[LoraAdapter]
    gate: GateNetwork
    policy: ActivationPolicy
    renorm_true_only: bool = False

    def __post_init__(self) -> None:
        n, m = self.base_weight.shape
        if self.gate.n_experts != len(self.experts):
            raise ConfigError(
                f"gate has {self.gate.n_experts} outputs but site has {len(self.experts)} experts"
            )
        if self.gate.weight.shape[1] != m:
            raise ShapeError(f"gate expects inputs of length {self.gate.weight.shape[1]}, site takes {m}")
        if all(e.is_placeholder for e in self.experts):
            raise ConfigError("site needs at least one non-placeholder expert")
        for e in self.experts:
            if e.n != n or e.m != m:
                raise ShapeError(f"expert dims {e.n}x{e.m} do not match site {n}x{m}")
        if isinstance(self.policy, TopK) and self.policy.k > len(self.experts):
            raise ConfigError(f"top-k k={self.policy.k} exceeds expert count {len(self.experts)}")

    @property
    def n_experts(self) -> int:
        return len(self.experts)


def gate_probs(gate: GateNetwork, x: np.ndarray) -> np.ndarray:
    """Activation probabilities softmax(weight @ x); positive, sum to 1."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (gate.weight.shape[1],):
        raise ShapeError(f"gate_probs: expected input of length {gate.weight.shape[1]}, got {x.shape}")
    return softmax(gate.weight @ x)


def select_topk(probs: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest probabilities, ties broken toward the lowest
    index. Returned in ascending index order."""
    probs = np.asarray(probs, dtype=np.float64)
    if not (1 <= k <= probs.shape[0]):
        raise ConfigError(f"top-k k={k} out of range for {probs.shape[0]} experts")
    order = np.argsort(-probs, kind="stable")  # stable sort keeps lower indices first on ties
    return sorted(int(i) for i in order[:k])


def select_topp(probs: np.ndarray, threshold: float) -> list[int]:
    """Smallest descending-probability prefix whose cumulative mass reaches
    the threshold. Returned in ascending index order."""
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"top-p threshold must lie in (0, 1), got {threshold}")
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    chosen: list[int] = []
    cum = 0.0
    for i in order:
        chosen.append(int(i))
        cum += probs[i]
        if cum >= threshold:
            break
    return sorted(chosen)


def select_experts(probs: np.ndarray, policy: ActivationPolicy) -> list[int]:
    if isinstance(policy, TopK):
        return select_topk(probs, policy.k)
    return select_topp(probs, policy.threshold)


def select_topk_batch(probs: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`select_topk` over a [T, E] probability matrix.

    Returns a [T, k] int array of ascending indices; row t equals
    ``select_topk(probs[t], k)`` exactly, including tie handling.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ShapeError(f"select_topk_batch: expected a 2-D matrix, got shape {probs.shape}")
    if not (1 <= k <= probs.shape[1]):
        raise ConfigError(f"top-k k={k} out of range for {probs.shape[1]} experts")
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    order.sort(axis=1)
    return order


def renormalize(probs: np.ndarray, selected: list[int]) -> dict[int, float]:
    """Weights proportional to probs over the selected set, summing to 1."""
    if not selected:
        raise ContractError("renormalize: selection must be non-empty")
    probs = np.asarray(probs, dtype=np.float64)
    mass = float(sum(probs[i] for i in selected))
    return {int(i): float(probs[i]) / mass for i in selected}


def moe_forward(site: ExpertLayerSite, x: np.ndarray) -> np.ndarray:
    """Single-token site output: base_weight @ x plus the weighted deltas of
    the selected non-placeholder experts.

    Selected placeholders contribute exactly zero; with the default
    renormalization they still hold their probability mass, so only the
    remaining true selections compute.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (site.base_weight.shape[1],):
        raise ShapeError(
            f"moe_forward: expected input of length {site.base_weight.shape[1]}, got {x.shape}"
        )
    probs = gate_probs(site.gate, x)
    selected = select_experts(probs, site.policy)
    if site.renorm_true_only:
        denom_set = [i for i in selected if not site.experts[i].is_placeholder]
    else:
        denom_set = selected
    out = site.base_weight @ x
    if not denom_set:
        return out  # every selected expert is a placeholder
    weights = renormalize(probs, denom_set)
    for i in selected:
        if site.experts[i].is_placeholder:
            continue
        out = out + weights[i] * adapter_delta(site.experts[i], x)
    return out


def true_selected_count(site: ExpertLayerSite, selected: list[int]) -> int:
    """Number of selected experts that actually compute."""
    return sum(1 for i in selected if not site.experts[i].is_placeholder)
