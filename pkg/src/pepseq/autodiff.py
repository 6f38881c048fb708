"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are wrapped in :class:`Tensor` nodes. Each operation computes its
result eagerly with numpy and records its input nodes together with a
backward closure, so the computation graph is rebuilt on every forward pass
(define-by-run). :func:`backward` walks that graph once in reverse
topological order and accumulates gradients into every node that requires
them; leaves created with ``requires_grad=True`` end up holding ``.grad``
arrays of the same shape as their values.

Only the primitives needed by the sequencing model live here: elementwise
arithmetic with broadcasting, 2-D matmul, a handful of fused numerically
stable ops (log-softmax, softmax, layer norm, log-add-exp), shape surgery
(slicing, concat, reshape, gather), GELU, and ``stop_gradient``. Multi-head
attention is composed from these instead of being a fused kernel.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericError",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "gather",
    "take_per_row",
    "exp",
    "log",
    "gelu",
    "logaddexp",
    "log_softmax",
    "softmax",
    "layer_norm",
    "linear",
    "scaled_dot_attention",
    "stop_gradient",
    "sum_all",
    "mean_all",
    "backward",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Shapes fed to an op do not satisfy its contract."""


class NumericError(ArithmeticError):
    """NaN or other numeric poison where the contract demands finite values."""


class Tensor:
    """A node in the differentiation graph wrapping a float64 ndarray."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; python scalars are lifted to constants.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return _slice(self, key)


def constant(values) -> Tensor:
    """A graph leaf that never receives gradient."""
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    """A trainable graph leaf."""
    return Tensor(values, requires_grad=True)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(values: np.ndarray, parents: Sequence[Tensor], bwd: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out_vals = a.values + b.values

    def bwd(g: np.ndarray) -> None:
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(out_vals, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_vals = a.values - b.values

    def bwd(g: np.ndarray) -> None:
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(out_vals, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_vals = a.values * b.values

    def bwd(g: np.ndarray) -> None:
        _accum(a, _unbroadcast(g * b.values, a.shape))
        _accum(b, _unbroadcast(g * a.values, b.shape))

    return _node(out_vals, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        _accum(a, -g)

    return _node(-a.values, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_vals = np.exp(a.values)

    def bwd(g: np.ndarray) -> None:
        _accum(a, g * out_vals)

    return _node(out_vals, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out_vals = np.log(a.values)

    def bwd(g: np.ndarray) -> None:
        _accum(a, g / a.values)

    return _node(out_vals, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """GELU in the tanh approximation (smooth everywhere)."""
    x = a.values
    k = np.sqrt(2.0 / np.pi)
    inner = k * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_vals = 0.5 * x * (1.0 + t)

    def bwd(g: np.ndarray) -> None:
        d_inner = k * (1.0 + 3 * 0.044715 * x**2)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner))

    return _node(out_vals, (a,), bwd)


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise log(exp(a) + exp(b)); -inf inputs behave as log(0)."""
    out_vals = np.logaddexp(a.values, b.values)

    def bwd(g: np.ndarray) -> None:
        # Where both inputs are -inf the output is -inf and the path carries
        # no probability mass: its gradient weight is 0, not exp(nan).
        dead = np.isneginf(out_vals)
        with np.errstate(invalid="ignore"):
            wa = np.where(dead, 0.0, np.exp(a.values - out_vals))
            wb = np.where(dead, 0.0, np.exp(b.values - out_vals))
        _accum(a, _unbroadcast(g * wa, a.shape))
        _accum(b, _unbroadcast(g * wb, b.shape))

    return _node(out_vals, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape surgery


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_vals = a.values @ b.values

    def bwd(g: np.ndarray) -> None:
        _accum(a, g @ b.values.T)
        _accum(b, a.values.T @ g)

    return _node(out_vals, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got shape {a.shape}")

    def bwd(g: np.ndarray) -> None:
        _accum(a, g.T)

    return _node(a.values.T, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_vals = a.values.reshape(shape)

    def bwd(g: np.ndarray) -> None:
        _accum(a, g.reshape(a.shape))

    return _node(out_vals, (a,), bwd)


def _slice(a: Tensor, key) -> Tensor:
    out_vals = a.values[key]

    def bwd(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        a.grad[key] += g

    return _node(out_vals, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    out_vals = np.concatenate([p.values for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bwd(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _node(out_vals, tuple(parts), bwd)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select rows (or entries, for 1-D input) along ``axis`` by integer index."""
    idx = np.asarray(indices, dtype=np.intp)
    out_vals = np.take(a.values, idx, axis=axis)

    def bwd(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        if axis == 0:
            np.add.at(a.grad, idx, g)
        else:
            moved = np.moveaxis(a.grad, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))

    return _node(out_vals, (a,), bwd)


def take_per_row(a: Tensor, indices) -> Tensor:
    """out[i] = a[i, indices[i]] for a 2-D tensor."""
    if a.ndim != 2:
        raise DimensionError(f"take_per_row expects a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise DimensionError(
            f"take_per_row needs one index per row: {idx.shape} vs {a.shape[0]} rows"
        )
    rows = np.arange(a.shape[0])
    out_vals = a.values[rows, idx]

    def bwd(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        np.add.at(a.grad, (rows, idx), g)

    return _node(out_vals, (a,), bwd)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity in the forward pass; blocks all gradient flow upstream."""
    return Tensor(a.values, requires_grad=False)


# ---------------------------------------------------------------------------
# fused, numerically stable ops


def log_softmax(a: Tensor, *, axis: int = -1) -> Tensor:
    x = a.values
    if np.isnan(x).any():
        raise NumericError("log_softmax input contains NaN")
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_vals = shifted - lse

    def bwd(g: np.ndarray) -> None:
        s = np.exp(out_vals)
        _accum(a, g - s * g.sum(axis=axis, keepdims=True))

    return _node(out_vals, (a,), bwd)


def softmax(a: Tensor, *, axis: int = -1) -> Tensor:
    x = a.values
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    m = np.max(x, axis=axis, keepdims=True)
    # A row of all -inf would produce 0/0; callers (attention) reject that
    # case up front, so guard only the shift here.
    shifted = np.where(np.isneginf(m), x, x - m)
    e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True)
    if np.any(denom == 0.0):
        raise NumericError("softmax row has no finite entry")
    out_vals = e / denom

    def bwd(g: np.ndarray) -> None:
        _accum(a, out_vals * (g - (g * out_vals).sum(axis=axis, keepdims=True)))

    return _node(out_vals, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out_vals = xhat * gain.values + bias.values

    def bwd(g: np.ndarray) -> None:
        lead = tuple(range(g.ndim - 1))
        _accum(bias, g.sum(axis=lead))
        _accum(gain, (g * xhat).sum(axis=lead))
        dxhat = g * gain.values
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(x, dx)

    return _node(out_vals, (x, gain, bias), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x of shape [..., in]; w is [in, out], b is [out]."""
    if w.ndim != 2:
        raise DimensionError(f"linear weight must be 2-D, got shape {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"linear input width {x.shape} does not match weight {w.shape}"
        )
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear bias shape {b.shape} does not match weight {w.shape}")
    if x.ndim == 2:
        return add(matmul(x, w), b)
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    out = add(matmul(flat, w), b)
    return reshape(out, lead + (w.shape[1],))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Single-head attention: softmax(q k^T / sqrt(d) + mask bias) v.

    ``mask`` is a boolean [Tq, Tk] array, True where attention is allowed.
    A row with no allowed position is a hard error.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention operands must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"q/k width mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"k/v length mismatch: {k.shape} vs {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[1])
    scores = mul(matmul(q, transpose(k)), constant(scale))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[0], k.shape[0]):
            raise DimensionError(
                f"mask shape {mask.shape} does not match scores {(q.shape[0], k.shape[0])}"
            )
        if not mask.any(axis=1).all():
            raise NumericError("attention mask leaves a query row with no allowed position")
        bias = np.where(mask, 0.0, -np.inf)
        scores = add(scores, constant(bias))
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        _accum(a, np.broadcast_to(g, a.shape).copy() if a.shape else np.asarray(g))

    return _node(np.asarray(a.values.sum()), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")

    def bwd(g: np.ndarray) -> None:
        _accum(a, np.full(a.shape, float(g) / n) if a.shape else np.asarray(g))

    return _node(np.asarray(a.values.mean()), (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the subgraph that needs gradients."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every requiring node."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.values).all():
        raise NumericError(f"backward needs a finite loss, got {loss.values!r}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-4,
    *,
    skip_blocked: bool = False,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must be a deterministic zero-argument callable that rebuilds its
    graph from the current ``.values`` of ``tensors`` and returns a scalar.
    Returns the maximum relative error over all checked coordinates, with
    the relative error of (a, b) defined as |a-b| / max(|a|, |b|, 1e-8).

    With ``skip_blocked=True``, coordinates whose analytic gradient is
    exactly 0.0 are skipped; use this when ``f`` routes a tensor through
    ``stop_gradient`` so the value path still moves under perturbation.
    ``max_coords_per_tensor`` samples coordinates for large parameter sets.
    """
    for t in tensors:
        t.zero_grad()
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in tensors]
    for t in tensors:
        t.zero_grad()

    worst = 0.0
    for t, an in zip(tensors, analytic):
        coords = list(np.ndindex(t.shape)) if t.shape else [()]
        if max_coords_per_tensor is not None and len(coords) > max_coords_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            picks = rng.choice(len(coords), size=max_coords_per_tensor, replace=False)
            coords = [coords[i] for i in picks]
        for idx in coords:
            a = float(an[idx])
            if skip_blocked and a == 0.0:
                continue
            orig = float(t.values[idx])
            t.values[idx] = orig + eps
            f_plus = f().item()
            t.values[idx] = orig - eps
            f_minus = f().item()
            t.values[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(fd - a) / max(abs(fd), abs(a), 1e-8)
            worst = max(worst, rel)
    return worst
