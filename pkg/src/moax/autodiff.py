"""Dense float64 matrix kernel with tape-based reverse-mode differentiation.

Every value is a 2-D, C-contiguous float64 array; callers represent vectors
as 1xN or Nx1 matrices. The op set is exactly what the toy transformer and
adapter-expert layers need -- there is no general broadcasting. Each op
records a node on a :class:`Tape`; nodes are appended in execution order,
so the tape is always topologically sorted and a single reversed sweep
implements backpropagation with a fixed accumulation order.

The kernel is single-threaded per tape. All reductions use numpy's
deterministic summation, so identical inputs produce bit-identical outputs
across runs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tape",
    "Tensor",
    "as_matrix",
    "softmax",
    "backward",
    "numeric_gradient",
    "relative_error",
]


def as_matrix(data, *, name: str = "matrix") -> np.ndarray:
    """Coerce input to a finite, 2-D, C-contiguous float64 array.

    1-D input becomes a single row. Anything else with ndim != 2 is a
    shape error, as is any non-finite entry.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ShapeError(f"{name}: matrix must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name}: matrix contains non-finite entries")
    return np.ascontiguousarray(arr)


def softmax(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector (max-subtraction form).

    Outputs are positive and sum to 1 within 1e-12.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"softmax: expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ShapeError("softmax: input contains non-finite entries")
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class Tape:
    """Ordered record of forward operations.

    Nodes are appended as they are created, so inputs always precede
    consumers. ``replay_matches`` recomputes every non-leaf node from its
    recorded op and inputs and checks the results are bit-identical.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def _register(self, node: "Tensor") -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def leaf(self, value, *, requires_grad: bool = False, name: str = "") -> "Tensor":
        return Tensor(self, as_matrix(value, name=name or "leaf"), requires_grad=requires_grad, name=name)

    def param(self, value, *, name: str = "") -> "Tensor":
        """Leaf that participates in gradient accumulation."""
        return self.leaf(value, requires_grad=True, name=name)

    def const(self, value, *, name: str = "") -> "Tensor":
        return self.leaf(value, requires_grad=False, name=name)

    def replay_matches(self) -> bool:
        """Recompute every op node and compare bit-exactly against stored values."""
        for node in self.nodes:
            if node.op is None:
                continue
            redone = _FORWARD[node.op]([t.value for t in node.inputs], node.ctx)
            if redone.shape != node.value.shape or not np.array_equal(redone, node.value):
                return False
        return True


class Tensor:
    """One tape node: a matrix value plus the op and inputs that produced it."""

    __slots__ = ("tape", "value", "op", "inputs", "ctx", "requires_grad", "grad", "index", "name")

    def __init__(
        self,
        tape: Tape,
        value: np.ndarray,
        *,
        op: str | None = None,
        inputs: tuple["Tensor", ...] = (),
        ctx: dict | None = None,
        requires_grad: bool = False,
        name: str = "",
    ) -> None:
        self.tape = tape
        self.value = value
        self.op = op
        self.inputs = inputs
        self.ctx = ctx or {}
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.index = -1
        tape._register(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def __repr__(self) -> str:
        op = self.op or "leaf"
        return f"Tensor({op}, shape={self.value.shape}, name={self.name!r})"


def _node(op: str, inputs: Sequence[Tensor], value: np.ndarray, ctx: dict | None = None) -> Tensor:
    tape = inputs[0].tape
    requires = any(t.requires_grad for t in inputs)
    return Tensor(tape, value, op=op, inputs=tuple(inputs), ctx=ctx, requires_grad=requires)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# primitives: forward builders
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product a @ b with row-major accumulation."""
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.value.shape} x {b.value.shape}")
    return _node("matmul", (a, b), a.value @ b.value)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes differ: {a.value.shape} vs {b.value.shape}")
    return _node("add", (a, b), a.value + b.value)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"sub: shapes differ: {a.value.shape} vs {b.value.shape}")
    return _node("sub", (a, b), a.value - b.value)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape matrices."""
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shapes differ: {a.value.shape} vs {b.value.shape}")
    return _node("mul", (a, b), a.value * b.value)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python float constant."""
    return _node("scale", (a,), a.value * float(c), {"c": float(c)})


def transpose(a: Tensor) -> Tensor:
    return _node("transpose", (a,), np.ascontiguousarray(a.value.T))


def relu(a: Tensor) -> Tensor:
    return _node("relu", (a,), np.maximum(a.value, 0.0))


def tanh(a: Tensor) -> Tensor:
    return _node("tanh", (a,), np.tanh(a.value))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise stable softmax."""
    return _node("softmax_rows", (a,), _softmax_rows(a.value))


def layer_norm_rows(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance. No learned affine."""
    mean = a.value.mean(axis=1, keepdims=True)
    var = a.value.var(axis=1, keepdims=True)
    # divide, do not multiply by the reciprocal: replay recomputes this exact
    # expression and the two forms differ in the last bit
    out = (a.value - mean) / np.sqrt(var + eps)
    return _node("layer_norm_rows", (a,), out, {"eps": float(eps)})


def gather_rows(a: Tensor, ids: Sequence[int]) -> Tensor:
    """Select rows a[ids]; doubles as the embedding lookup."""
    ids_arr = np.asarray(ids, dtype=np.int64)
    if ids_arr.ndim != 1 or ids_arr.size == 0:
        raise ShapeError("gather_rows: ids must be a non-empty 1-D index list")
    if ids_arr.min() < 0 or ids_arr.max() >= a.value.shape[0]:
        raise ShapeError(f"gather_rows: index out of range for {a.value.shape[0]} rows")
    return _node("gather_rows", (a,), np.ascontiguousarray(a.value[ids_arr]), {"ids": ids_arr})


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    return gather_rows(table, ids)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.value.shape[1]):
        raise ShapeError(f"slice_cols: bad range [{start}:{stop}] for {a.value.shape[1]} cols")
    return _node("slice_cols", (a,), np.ascontiguousarray(a.value[:, start:stop]), {"start": start, "stop": stop})


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: need at least one input")
    rows = parts[0].value.shape[0]
    if any(p.value.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    widths = [p.value.shape[1] for p in parts]
    return _node("concat_cols", tuple(parts), np.concatenate([p.value for p in parts], axis=1), {"widths": widths})


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Scale row i of a by the scalar s[i]; s must be a column Tx1."""
    if s.value.shape != (a.value.shape[0], 1):
        raise ShapeError(f"scale_rows: scale must be {a.value.shape[0]}x1, got {s.value.shape}")
    return _node("scale_rows", (a, s), a.value * s.value)


def reciprocal(a: Tensor) -> Tensor:
    """Elementwise 1/x. Caller must guarantee nonzero entries."""
    return _node("reciprocal", (a,), 1.0 / a.value)


def row_sum(a: Tensor) -> Tensor:
    """Sum over columns, producing a Tx1 column."""
    return _node("row_sum", (a,), a.value.sum(axis=1, keepdims=True))


def sum_all(a: Tensor) -> Tensor:
    return _node("sum_all", (a,), np.array([[a.value.sum()]]))


def mean_all(a: Tensor) -> Tensor:
    return _node("mean_all", (a,), np.array([[a.value.mean()]]))


def cross_entropy_mean(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax.

    Returns a 1x1 scalar node; the backward pass uses the closed form
    (softmax(z) - onehot(y)) / T.
    """
    t = np.asarray(targets, dtype=np.int64)
    if t.ndim != 1 or t.shape[0] != logits.value.shape[0]:
        raise ShapeError(f"cross_entropy_mean: need one target per row, got {t.shape} for {logits.value.shape}")
    if t.min() < 0 or t.max() >= logits.value.shape[1]:
        raise ShapeError("cross_entropy_mean: target index out of range")
    z = logits.value
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    nll = logsumexp - shifted[np.arange(t.shape[0]), t]
    return _node("cross_entropy_mean", (logits,), np.array([[nll.mean()]]), {"targets": t})


# ---------------------------------------------------------------------------
# replay table (used by Tape.replay_matches)
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable[[list[np.ndarray], dict], np.ndarray]] = {
    "matmul": lambda v, ctx: v[0] @ v[1],
    "add": lambda v, ctx: v[0] + v[1],
    "sub": lambda v, ctx: v[0] - v[1],
    "mul": lambda v, ctx: v[0] * v[1],
    "scale": lambda v, ctx: v[0] * ctx["c"],
    "transpose": lambda v, ctx: np.ascontiguousarray(v[0].T),
    "relu": lambda v, ctx: np.maximum(v[0], 0.0),
    "tanh": lambda v, ctx: np.tanh(v[0]),
    "softmax_rows": lambda v, ctx: _softmax_rows(v[0]),
    "layer_norm_rows": lambda v, ctx: (v[0] - v[0].mean(axis=1, keepdims=True))
    / np.sqrt(v[0].var(axis=1, keepdims=True) + ctx["eps"]),
    "gather_rows": lambda v, ctx: np.ascontiguousarray(v[0][ctx["ids"]]),
    "slice_cols": lambda v, ctx: np.ascontiguousarray(v[0][:, ctx["start"]:ctx["stop"]]),
    "concat_cols": lambda v, ctx: np.concatenate(v, axis=1),
    "scale_rows": lambda v, ctx: v[0] * v[1],
    "reciprocal": lambda v, ctx: 1.0 / v[0],
    "row_sum": lambda v, ctx: v[0].sum(axis=1, keepdims=True),
    "sum_all": lambda v, ctx: np.array([[v[0].sum()]]),
    "mean_all": lambda v, ctx: np.array([[v[0].mean()]]),
    "cross_entropy_mean": lambda v, ctx: _ce_forward(v[0], ctx["targets"]),
}


def _ce_forward(z: np.ndarray, t: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    nll = logsumexp - shifted[np.arange(t.shape[0]), t]
    return np.array([[nll.mean()]])


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _bwd_matmul(node: Tensor, g: np.ndarray) -> None:
    a, b = node.inputs
    _accumulate(a, g @ b.value.T)
    _accumulate(b, a.value.T @ g)


def _bwd_add(node: Tensor, g: np.ndarray) -> None:
    _accumulate(node.inputs[0], g)
    _accumulate(node.inputs[1], g)


def _bwd_sub(node: Tensor, g: np.ndarray) -> None:
    _accumulate(node.inputs[0], g)
    _accumulate(node.inputs[1], -g)


def _bwd_mul(node: Tensor, g: np.ndarray) -> None:
    a, b = node.inputs
    _accumulate(a, g * b.value)
    _accumulate(b, g * a.value)


def _bwd_scale(node: Tensor, g: np.ndarray) -> None:
    _accumulate(node.inputs[0], g * node.ctx["c"])


def _bwd_transpose(node: Tensor, g: np.ndarray) -> None:
    _accumulate(node.inputs[0], np.ascontiguousarray(g.T))


def _bwd_relu(node: Tensor, g: np.ndarray) -> None:
    _accumulate(node.inputs[0], g * (node.inputs[0].value > 0.0))


def _bwd_tanh(node: Tensor, g: np.ndarray) -> None:
    _accumulate(node.inputs[0], g * (1.0 - node.value * node.value))


def _bwd_softmax_rows(node: Tensor, g: np.ndarray) -> None:
    s = node.value
    _accumulate(node.inputs[0], s * (g - (g * s).sum(axis=1, keepdims=True)))


def _bwd_layer_norm_rows(node: Tensor, g: np.ndarray) -> None:
    x = node.inputs[0].value
    eps = node.ctx["eps"]
    inv = 1.0 / np.sqrt(x.var(axis=1, keepdims=True) + eps)
    y = node.value
    gm = g.mean(axis=1, keepdims=True)
    gym = (g * y).mean(axis=1, keepdims=True)
    _accumulate(node.inputs[0], inv * (g - gm - y * gym))


def _bwd_gather_rows(node: Tensor, g: np.ndarray) -> None:
    a = node.inputs[0]
    if not a.requires_grad:
        return
    ga = np.zeros_like(a.value)
    np.add.at(ga, node.ctx["ids"], g)
    _accumulate(a, ga)


def _bwd_slice_cols(node: Tensor, g: np.ndarray) -> None:
    a = node.inputs[0]
    if not a.requires_grad:
        return
    ga = np.zeros_like(a.value)
    ga[:, node.ctx["start"]:node.ctx["stop"]] = g
    _accumulate(a, ga)


def _bwd_concat_cols(node: Tensor, g: np.ndarray) -> None:
    offset = 0
    for part, width in zip(node.inputs, node.ctx["widths"]):
        _accumulate(part, np.ascontiguousarray(g[:, offset:offset + width]))
        offset += width


def _bwd_scale_rows(node: Tensor, g: np.ndarray) -> None:
    a, s = node.inputs
    _accumulate(a, g * s.value)
    _accumulate(s, (g * a.value).sum(axis=1, keepdims=True))


def _bwd_reciprocal(node: Tensor, g: np.ndarray) -> None:
    _accumulate(node.inputs[0], -g * node.value * node.value)


def _bwd_row_sum(node: Tensor, g: np.ndarray) -> None:
    a = node.inputs[0]
    _accumulate(a, np.broadcast_to(g, a.value.shape).copy())


def _bwd_sum_all(node: Tensor, g: np.ndarray) -> None:
    a = node.inputs[0]
    _accumulate(a, np.full_like(a.value, g[0, 0]))


def _bwd_mean_all(node: Tensor, g: np.ndarray) -> None:
    a = node.inputs[0]
    _accumulate(a, np.full_like(a.value, g[0, 0] / a.value.size))


def _bwd_cross_entropy_mean(node: Tensor, g: np.ndarray) -> None:
    logits = node.inputs[0]
    t = node.ctx["targets"]
    probs = _softmax_rows(logits.value)
    probs[np.arange(t.shape[0]), t] -= 1.0
    _accumulate(logits, g[0, 0] * probs / t.shape[0])


_BACKWARD: dict[str, Callable[[Tensor, np.ndarray], None]] = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "scale": _bwd_scale,
    "transpose": _bwd_transpose,
    "relu": _bwd_relu,
    "tanh": _bwd_tanh,
    "softmax_rows": _bwd_softmax_rows,
    "layer_norm_rows": _bwd_layer_norm_rows,
    "gather_rows": _bwd_gather_rows,
    "slice_cols": _bwd_slice_cols,
    "concat_cols": _bwd_concat_cols,
    "scale_rows": _bwd_scale_rows,
    "reciprocal": _bwd_reciprocal,
    "row_sum": _bwd_row_sum,
    "sum_all": _bwd_sum_all,
    "mean_all": _bwd_mean_all,
    "cross_entropy_mean": _bwd_cross_entropy_mean,
}


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable grad-enabled leaf.

    The loss node must be a 1x1 scalar. Gradients of prior backward calls
    on the same tape are cleared first; accumulation order is the fixed
    reverse tape order.
    """
    if loss.tape is not tape:
        raise ContractError("backward: loss node does not belong to this tape")
    if loss.value.shape != (1, 1):
        raise ContractError(f"backward: loss must be a 1x1 scalar, got shape {loss.value.shape}")
    for node in tape.nodes[: loss.index + 1]:
        node.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(tape.nodes[: loss.index + 1]):
        if node.op is None or node.grad is None or not node.requires_grad:
            continue
        _BACKWARD[node.op](node, node.grad)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def numeric_gradient(
    loss_fn: Callable[[], float],
    arrays: Iterable[np.ndarray],
    step: float = 1e-4,
) -> list[np.ndarray]:
    """Central finite differences of loss_fn w.r.t. each array, elementwise.

    Arrays are perturbed in place and restored; loss_fn must read them
    fresh on every call.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            f_plus = loss_fn()
            arr[idx] = orig - step
            f_minus = loss_fn()
            arr[idx] = orig
            g[idx] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor).

    The floor keeps finite-difference noise on near-zero gradients from
    registering as large relative errors; it is far below unit-scale
    gradients, which the checks target.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
