"""Low-rank adapter experts: seeded initialization and factored delta application.

An adapter is a pair (a, b) with a in R^{n x r} and b in R^{r x m} added to a
frozen n x m weight as w + a @ b. The delta for an input x is always computed
factored as a @ (b @ x), cost O(r(n+m)); the dense n x m product is never
materialized. Placeholder adapters own no parameters and contribute nothing;
routers may still select them.

Adapters are immutable between optimizer steps: the single-threaded trainer
is the only writer, so concurrent readers are safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

DEFAULT_INIT_STD = 0.02  # gaussian scale for a; b always starts at zero


@dataclass
class LoraAdapter:
    """One expert's low-rank pair, or a parameterless placeholder.

    For a real adapter: a is n x r, b is r x m, and rank == r. A freshly
    initialized adapter has b == 0, so its delta is identically zero.
    For a placeholder: a and b are None and rank is 0.
    """

    n: int
    m: int
    rank: int
    a: np.ndarray | None
    b: np.ndarray | None
    is_placeholder: bool = False
    delta_scale: float = field(default=1.0, repr=False)  # optional hook; 1.0 = plain a@b

    def __post_init__(self) -> None:
        if self.is_placeholder:
            if self.a is not None or self.b is not None or self.rank != 0:
                raise ConfigError("placeholder adapter must have no matrices and rank 0")
            return
        if self.a is None or self.b is None:
            raise ConfigError("non-placeholder adapter requires both matrices")
        if not (1 <= self.rank <= min(self.n, self.m)):
            raise ConfigError(f"rank {self.rank} out of range for {self.n}x{self.m}")
        if self.a.shape != (self.n, self.rank) or self.b.shape != (self.rank, self.m):
            raise ShapeError(
                f"adapter matrices have shapes {self.a.shape}/{self.b.shape}, "
                f"expected {(self.n, self.rank)}/{(self.rank, self.m)}"
            )

    def param_count(self) -> int:
        """Exactly r*(n+m) for a real adapter, 0 for a placeholder."""
        if self.is_placeholder:
            return 0
        return self.rank * (self.n + self.m)


def placeholder_adapter(n: int, m: int) -> LoraAdapter:
    """A selectable null expert: no parameters, zero output."""
    return LoraAdapter(n=n, m=m, rank=0, a=None, b=None, is_placeholder=True)


def init_adapter(n: int, m: int, r: int, seed: int, std: float = DEFAULT_INIT_STD) -> LoraAdapter:
    """Seeded adapter init: a ~ N(0, std^2) i.i.d., b all zeros.

    Identical arguments produce bit-identical matrices.
    """
    if not (1 <= r <= min(n, m)):
        raise ConfigError(f"rank {r} out of range: need 1 <= r <= min({n}, {m})")
    if std <= 0:
        raise ConfigError(f"init std must be positive, got {std}")
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, std, size=(n, r))
    b = np.zeros((r, m))
    return LoraAdapter(n=n, m=m, rank=r, a=a, b=b)


def adapter_delta(adapter: LoraAdapter, x: np.ndarray) -> np.ndarray:
    """Delta contribution a @ (b @ x) for a length-m input vector."""
    if adapter.is_placeholder:
        raise ContractError("adapter_delta called on a placeholder; callers must skip placeholders")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (adapter.m,):
        raise ShapeError(f"adapter_delta: expected input of length {adapter.m}, got shape {x.shape}")
    out = adapter.a @ (adapter.b @ x)
    if adapter.delta_scale != 1.0:
        out = out * adapter.delta_scale
    return out
