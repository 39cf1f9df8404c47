"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are contiguous row-major numpy float64 arrays of rank at most 3.
A Node wraps one value together with the local backward rules of the op
that produced it; ``backward`` walks the graph exactly once in reverse
topological order and accumulates gradients into the leaves.

Every forward op verifies its output is finite and raises NumericalError
otherwise, so NaN/Inf never propagates silently.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError

MAX_RANK = 3

Vjp = Callable[[np.ndarray], np.ndarray]


def as_value(x) -> np.ndarray:
    """Coerce to a contiguous float64 array of rank <= 3 (rank 0 = scalar)."""
    arr = np.asarray(x, dtype=np.float64, order="C")
    if arr.ndim > MAX_RANK:
        raise ValueError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{op}: non-finite values in output")


class Node:
    """A tensor value plus the backward edges that produced it."""

    __slots__ = ("value", "grad", "requires_grad", "_parents")

    def __init__(self, value, requires_grad: bool = True):
        self.value = as_value(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[tuple["Node", Vjp], ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def detach(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def parameter(x) -> Node:
    return Node(x, requires_grad=True)


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def _coerce(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(op: str, value: np.ndarray, parents: Sequence[tuple[Node, Vjp]]) -> Node:
    _check_finite(value, op)
    keep = tuple((p, f) for p, f in parents if p.requires_grad)
    out = Node(value, requires_grad=bool(keep))
    out._parents = keep
    return out


def _topo_order(root: Node) -> list[Node]:
    """Parents-first ordering; each node appears exactly once."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into each reachable leaf's ``grad``."""
    if seed is None:
        seed_arr = np.ones_like(root.value)
    else:
        seed_arr = as_value(seed)
        if seed_arr.shape != root.value.shape:
            raise ValueError("seed shape must match root shape")
    root.grad = seed_arr if root.grad is None else root.grad + seed_arr
    for node in reversed(_topo_order(root)):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node._parents:
            pg = vjp(g)
            parent.grad = pg if parent.grad is None else parent.grad + pg


def zero_grad(nodes) -> None:
    values = nodes.values() if isinstance(nodes, dict) else nodes
    for n in values:
        n.grad = None


# ---------------------------------------------------------------------------
# elementwise ops (broadcast only between identical shapes or with a scalar)


def _check_pair(a: Node, b: Node, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _shrink_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    # reduce a broadcast gradient back to a scalar operand
    if g.shape == shape:
        return g
    return np.asarray(np.sum(g))


def add(a, b) -> Node:
    a, b = _coerce(a), _coerce(b)
    _check_pair(a, b, "add")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.value + b.value
    return _make(
        "add",
        out,
        [(a, lambda g: _shrink_to(a.shape, g)), (b, lambda g: _shrink_to(b.shape, g))],
    )


def sub(a, b) -> Node:
    a, b = _coerce(a), _coerce(b)
    _check_pair(a, b, "sub")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.value - b.value
    return _make(
        "sub",
        out,
        [(a, lambda g: _shrink_to(a.shape, g)), (b, lambda g: _shrink_to(b.shape, -g))],
    )


def mul(a, b) -> Node:
    a, b = _coerce(a), _coerce(b)
    _check_pair(a, b, "mul")
    av, bv = a.value, b.value
    with np.errstate(over="ignore", invalid="ignore"):
        out = av * bv
    return _make(
        "mul",
        out,
        [(a, lambda g: _shrink_to(a.shape, g * bv)), (b, lambda g: _shrink_to(b.shape, g * av))],
    )


def div(a, b) -> Node:
    a, b = _coerce(a), _coerce(b)
    _check_pair(a, b, "div")
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _make(
        "div",
        out,
        [
            (a, lambda g: _shrink_to(a.shape, g / bv)),
            (b, lambda g: _shrink_to(b.shape, -g * av / (bv * bv))),
        ],
    )


def neg(a) -> Node:
    a = _coerce(a)
    return _make("neg", -a.value, [(a, lambda g: -g)])


def _sigmoid_value(v: np.ndarray) -> np.ndarray:
    # exp argument is always <= 0, so no overflow at either tail
    return np.exp(np.minimum(v, 0.0)) / (1.0 + np.exp(-np.abs(v)))


def sigmoid(a) -> Node:
    a = _coerce(a)
    s = _sigmoid_value(a.value)
    return _make("sigmoid", s, [(a, lambda g: g * s * (1.0 - s))])


def relu(a) -> Node:
    a = _coerce(a)
    av = a.value
    return _make("relu", np.maximum(av, 0.0), [(a, lambda g: g * (av > 0.0))])


def exp(a) -> Node:
    a = _coerce(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make("exp", out, [(a, lambda g: g * out)])


def log(a) -> Node:
    a = _coerce(a)
    if np.any(a.value <= 0.0):
        raise NumericalError("log: non-positive input")
    av = a.value
    return _make("log", np.log(av), [(a, lambda g: g / av)])


def sqrt(a) -> Node:
    a = _coerce(a)
    if np.any(a.value < 0.0):
        raise NumericalError("sqrt: negative input")
    out = np.sqrt(a.value)
    return _make("sqrt", out, [(a, lambda g: g * 0.5 / out)])


def clip(a, lo: float | None, hi: float | None) -> Node:
    """Clamp values; gradient passes only where the input lies inside [lo, hi]."""
    a = _coerce(a)
    low = -np.inf if lo is None else lo
    high = np.inf if hi is None else hi
    av = a.value
    mask = (av >= low) & (av <= high)
    return _make("clip", np.clip(av, low, high), [(a, lambda g: g * mask)])


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Node:
    """Matrix/vector product for rank-1 and rank-2 operands."""
    a, b = _coerce(a), _coerce(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ValueError(f"matmul: operands must be rank 1 or 2, got {av.ndim} and {bv.ndim}")
    inner_a = av.shape[-1]
    inner_b = bv.shape[0]
    if inner_a != inner_b:
        raise ValueError(f"matmul: inner dimensions {inner_a} and {inner_b} do not match")
    with np.errstate(over="ignore", invalid="ignore"):
        out = av @ bv

    def vjp_a(g: np.ndarray) -> np.ndarray:
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv)
        return g * bv  # both rank 1, g scalar

    def vjp_b(g: np.ndarray) -> np.ndarray:
        if av.ndim == 2 and bv.ndim == 2:
            return av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 1:
            return av.T @ g
        return g * av

    return _make("matmul", out, [(a, vjp_a), (b, vjp_b)])


def transpose(a) -> Node:
    a = _coerce(a)
    if a.ndim != 2:
        raise ValueError("transpose: rank-2 input required")
    return _make("transpose", a.value.T, [(a, lambda g: g.T)])


def reshape(a, shape: tuple[int, ...]) -> Node:
    a = _coerce(a)
    orig = a.shape
    return _make("reshape", a.value.reshape(shape), [(a, lambda g: g.reshape(orig))])


def add_rowvec(x, v) -> Node:
    """x[T, D] + v[D] broadcast over rows (linear-layer bias)."""
    x, v = _coerce(x), _coerce(v)
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ValueError(f"add_rowvec: incompatible shapes {x.shape} and {v.shape}")
    return _make(
        "add_rowvec",
        x.value + v.value[None, :],
        [(x, lambda g: g), (v, lambda g: g.sum(axis=0))],
    )


def scale_rows(x, s) -> Node:
    """Multiply row t of x[T, D] by s[t]."""
    x, s = _coerce(x), _coerce(s)
    if x.ndim != 2 or s.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ValueError(f"scale_rows: incompatible shapes {x.shape} and {s.shape}")
    xv, sv = x.value, s.value
    return _make(
        "scale_rows",
        xv * sv[:, None],
        [(x, lambda g: g * sv[:, None]), (s, lambda g: (g * xv).sum(axis=1))],
    )


def conv1d(x, w, bias) -> Node:
    """Temporal cross-correlation with same-length zero padding.

    x is [T, Din], w is [k, Din, Dout], bias is [Dout]. Padding is
    floor((k-1)/2) zeros on the left and ceil((k-1)/2) on the right, so the
    output keeps length T for odd and even k alike. k may exceed T.
    """
    x, w, bias = _coerce(x), _coerce(w), _coerce(bias)
    if x.ndim != 2 or w.ndim != 3 or bias.ndim != 1:
        raise ValueError("conv1d: expected x[T,Din], w[k,Din,Dout], bias[Dout]")
    k, w_din, dout = w.shape
    t, din = x.shape
    if k <= 0:
        raise ValueError("conv1d: kernel size must be >= 1")
    if w_din != din or bias.shape[0] != dout:
        raise ValueError(f"conv1d: incompatible shapes x{x.shape}, w{w.shape}, bias{bias.shape}")
    left = (k - 1) // 2
    xpad = np.zeros((t + k - 1, din))
    xpad[left:left + t] = x.value
    wv = w.value
    out = np.empty((t, dout))
    out[:] = bias.value
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(k):
            out += xpad[j:j + t] @ wv[j]

    def vjp_x(g: np.ndarray) -> np.ndarray:
        gpad = np.zeros_like(xpad)
        for j in range(k):
            gpad[j:j + t] += g @ wv[j].T
        return gpad[left:left + t]

    def vjp_w(g: np.ndarray) -> np.ndarray:
        gw = np.empty_like(wv)
        for j in range(k):
            gw[j] = xpad[j:j + t].T @ g
        return gw

    return _make(
        "conv1d", out, [(x, vjp_x), (w, vjp_w), (bias, lambda g: g.sum(axis=0))]
    )


def depthwise_conv1d(x, w, bias) -> Node:
    """Per-channel temporal cross-correlation, same padding rule as conv1d.

    x is [T, D], w is [k, D], bias is [D]; channel c is filtered by w[:, c].
    """
    x, w, bias = _coerce(x), _coerce(w), _coerce(bias)
    if x.ndim != 2 or w.ndim != 2 or bias.ndim != 1:
        raise ValueError("depthwise_conv1d: expected x[T,D], w[k,D], bias[D]")
    k, w_d = w.shape
    t, d = x.shape
    if k <= 0:
        raise ValueError("depthwise_conv1d: kernel size must be >= 1")
    if w_d != d or bias.shape[0] != d:
        raise ValueError(
            f"depthwise_conv1d: incompatible shapes x{x.shape}, w{w.shape}, bias{bias.shape}"
        )
    left = (k - 1) // 2
    xpad = np.zeros((t + k - 1, d))
    xpad[left:left + t] = x.value
    wv = w.value
    out = np.empty((t, d))
    out[:] = bias.value
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(k):
            out += xpad[j:j + t] * wv[j]

    def vjp_x(g: np.ndarray) -> np.ndarray:
        gpad = np.zeros_like(xpad)
        for j in range(k):
            gpad[j:j + t] += g * wv[j]
        return gpad[left:left + t]

    def vjp_w(g: np.ndarray) -> np.ndarray:
        gw = np.empty_like(wv)
        for j in range(k):
            gw[j] = (xpad[j:j + t] * g).sum(axis=0)
        return gw

    return _make(
        "depthwise_conv1d", out, [(x, vjp_x), (w, vjp_w), (bias, lambda g: g.sum(axis=0))]
    )


# ---------------------------------------------------------------------------
# reductions and row ops


def _check_axis(x: Node, axis: int | None, op: str) -> None:
    if axis is not None:
        if not -x.ndim <= axis < x.ndim:
            raise ValueError(f"{op}: axis {axis} out of range for rank {x.ndim}")
        if x.shape[axis] == 0:
            raise ValueError(f"{op}: empty axis {axis}")
    elif x.value.size == 0:
        raise ValueError(f"{op}: empty input")


def _spread(g: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def reduce_sum(x, axis: int | None = None) -> Node:
    x = _coerce(x)
    _check_axis(x, axis, "reduce_sum")
    shape = x.shape
    return _make(
        "reduce_sum", np.sum(x.value, axis=axis), [(x, lambda g: _spread(g, shape, axis))]
    )


def reduce_mean(x, axis: int | None = None) -> Node:
    x = _coerce(x)
    _check_axis(x, axis, "reduce_mean")
    shape = x.shape
    n = x.value.size if axis is None else shape[axis]
    return _make(
        "reduce_mean",
        np.mean(x.value, axis=axis),
        [(x, lambda g: _spread(g, shape, axis) / n)],
    )


def reduce_max(x, axis: int | None = None) -> Node:
    """Max reduction; gradient routes to the first (lowest-index) argmax."""
    x = _coerce(x)
    _check_axis(x, axis, "reduce_max")
    xv = x.value

    if axis is None:
        flat_idx = int(np.argmax(xv))

        def vjp(g: np.ndarray) -> np.ndarray:
            gz = np.zeros_like(xv)
            gz.flat[flat_idx] = g
            return gz

        return _make("reduce_max", np.max(xv), [(x, vjp)])

    idx = np.argmax(xv, axis=axis)

    def vjp_axis(g: np.ndarray) -> np.ndarray:
        gz = np.zeros_like(xv)
        np.put_along_axis(gz, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return gz

    return _make("reduce_max", np.max(xv, axis=axis), [(x, vjp_axis)])


def gather_rows(x, idx) -> Node:
    """Select rows of x[T, D]; backward scatters into the selected rows only.

    Indices are constants: no gradient flows through the selection itself, and
    duplicate indices accumulate their gradients.
    """
    x = _coerce(x)
    if x.ndim != 2:
        raise ValueError("gather_rows: rank-2 input required")
    idx_arr = np.asarray(idx, dtype=np.intp)
    if idx_arr.ndim != 1:
        raise ValueError("gather_rows: indices must be a flat sequence")
    t = x.shape[0]
    if idx_arr.size and (idx_arr.min() < 0 or idx_arr.max() >= t):
        raise IndexError(f"gather_rows: index out of range [0, {t})")
    xv = x.value

    def vjp(g: np.ndarray) -> np.ndarray:
        gz = np.zeros_like(xv)
        np.add.at(gz, idx_arr, g)
        return gz

    return _make("gather_rows", xv[idx_arr], [(x, vjp)])


LAYERNORM_EPS = 1e-5


def layernorm(x, gain, bias) -> Node:
    """Per-row standardization of x[T, D] followed by the affine gain/bias."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ValueError(
            f"layernorm: incompatible shapes x{x.shape}, gain{gain.shape}, bias{bias.shape}"
        )
    xv = x.value
    with np.errstate(over="ignore", invalid="ignore"):
        mu = xv.mean(axis=1, keepdims=True)
        xc = xv - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
        xhat = xc * inv
    gv = gain.value

    def vjp_x(g: np.ndarray) -> np.ndarray:
        dxhat = g * gv
        return inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )

    return _make(
        "layernorm",
        xhat * gv + bias.value,
        [
            (x, vjp_x),
            (gain, lambda g: (g * xhat).sum(axis=0)),
            (bias, lambda g: g.sum(axis=0)),
        ],
    )


def softmax_rows(x) -> Node:
    """Row-wise softmax of a rank-2 input, computed with max subtraction."""
    x = _coerce(x)
    if x.ndim != 2:
        raise ValueError("softmax_rows: rank-2 input required")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g: np.ndarray) -> np.ndarray:
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return _make("softmax_rows", y, [(x, vjp)])
