"""Reverse-mode differentiation over dense float64 arrays.

Every op registers an adjoint that is itself written in terms of ops from
this module, so a backward pass run under ``record_backward=True`` yields
gradient Nodes that can be differentiated again. That second level is what
lets a loss on per-token gradient norms be trained.

    >>> x = tensor([3.0, 4.0], requires_grad=True)
    >>> (gx,) = gradient(norm(x), [x])
    >>> gx.value.tolist()
    [0.6, 0.8]
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractViolation, NumericFault

_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def recording(flag: bool) -> Iterator[None]:
    prev = is_recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


def no_grad():
    """Context in which ops build constants instead of graph nodes."""
    return recording(False)


class Node:
    __slots__ = ("value", "op", "parents", "requires_grad", "vjp")

    def __init__(self, value, op: str = "leaf", parents: tuple = (),
                 requires_grad: bool = False, vjp: Callable | None = None):
        self.value = value
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.vjp = vjp

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def tensor(value, requires_grad: bool = False) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=requires_grad)


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def stop_gradient(x: Node) -> Node:
    return constant(as_node(x).value)


def _make(value, op: str, parents: tuple, vjp: Callable | None) -> Node:
    if is_recording() and any(p.requires_grad for p in parents):
        return Node(value, op, parents, True, vjp)
    return Node(value, op)


# --- shape plumbing -------------------------------------------------------

def _reduce_to(value: np.ndarray, shape: tuple) -> np.ndarray:
    lead = value.ndim - len(shape)
    if lead:
        value = value.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    return value


def sum_to(x, shape: tuple) -> Node:
    x = as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _make(_reduce_to(x.value, shape), "sum_to", (x,),
                 lambda g: (broadcast_to(g, x.shape),))


def broadcast_to(x, shape: tuple) -> Node:
    x = as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _make(np.broadcast_to(x.value, shape).copy(), "broadcast_to", (x,),
                 lambda g: (sum_to(g, x.shape),))


def reshape(x, shape: tuple) -> Node:
    x = as_node(x)
    return _make(x.value.reshape(shape), "reshape", (x,),
                 lambda g: (reshape(g, x.shape),))


def transpose(x) -> Node:
    """Swap the last two axes."""
    x = as_node(x)
    return _make(np.swapaxes(x.value, -1, -2), "transpose", (x,),
                 lambda g: (transpose(g),))


def getitem(x, idx) -> Node:
    x = as_node(x)
    return _make(x.value[idx], "getitem", (x,),
                 lambda g: (index_add(g, idx, x.shape),))


def index_add(g, idx, shape: tuple) -> Node:
    """Scatter ``g`` into zeros of ``shape`` at ``idx``, summing repeats."""
    g = as_node(g)
    out = np.zeros(shape)
    np.add.at(out, idx, g.value)
    return _make(out, "index_add", (g,), lambda gg: (getitem(gg, idx),))


def gather_rows(table, ids) -> Node:
    """Embedding lookup: rows of ``table`` selected by integer ``ids``."""
    return getitem(table, np.asarray(ids, dtype=np.intp))


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    value = np.concatenate([n.value for n in nodes], axis=axis)
    ax = axis % value.ndim
    bounds = np.cumsum([0] + [n.shape[ax] for n in nodes])

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * value.ndim
            sl[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return _make(value, "concat", tuple(nodes), vjp)


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    expanded = [reshape(n, n.shape[:axis] + (1,) + n.shape[axis:]) for n in nodes]
    return concat(expanded, axis=axis)


# --- arithmetic -----------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(a.value + b.value, "add", (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(a.value - b.value, "sub", (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(scale(g, -1.0), b.shape)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(a.value * b.value, "mul", (a, b),
                 lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def vjp(g):
        ga = div(g, b)
        gb = scale(div(mul(ga, a), b), -1.0)
        return sum_to(ga, a.shape), sum_to(gb, b.shape)

    return _make(a.value / b.value, "div", (a, b), vjp)


def scale(x, c: float) -> Node:
    x = as_node(x)
    c = float(c)
    return _make(x.value * c, "scale", (x,), lambda g: (scale(g, c),))


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul needs operands of rank >= 2")

    def vjp(g):
        return (sum_to(matmul(g, transpose(b)), a.shape),
                sum_to(matmul(transpose(a), g), b.shape))

    return _make(a.value @ b.value, "matmul", (a, b), vjp)


# --- elementwise nonlinearities ------------------------------------------

def tanh(x) -> Node:
    x = as_node(x)
    out = _make(np.tanh(x.value), "tanh", (x,), None)
    if out.requires_grad:
        out.vjp = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def exp(x) -> Node:
    x = as_node(x)
    with np.errstate(over="ignore"):
        value = np.exp(x.value)
    if not np.all(np.isfinite(value)):
        raise NumericFault("overflow in exp", op="exp")
    out = _make(value, "exp", (x,), None)
    if out.requires_grad:
        out.vjp = lambda g: (mul(g, out),)
    return out


def log(x) -> Node:
    x = as_node(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(x.value)
    return _make(value, "log", (x,), lambda g: (div(g, x),))


def sqrt(x) -> Node:
    x = as_node(x)
    out = _make(np.sqrt(x.value), "sqrt", (x,), None)
    if out.requires_grad:
        out.vjp = lambda g: (div(g, scale(out, 2.0)),)
    return out


def relu(x) -> Node:
    """Hinge ``max(0, x)``; the subgradient at exactly 0 is 0."""
    return maximum(x, 0.0)


def maximum(x, c: float) -> Node:
    x = as_node(x)
    mask = constant(x.value > c)
    return _make(np.maximum(x.value, c), "maximum", (x,), lambda g: (mul(g, mask),))


def minimum(x, c: float) -> Node:
    x = as_node(x)
    mask = constant(x.value < c)
    return _make(np.minimum(x.value, c), "minimum", (x,), lambda g: (mul(g, mask),))


# --- reductions -----------------------------------------------------------

def _keepdims_shape(shape: tuple, axis) -> tuple:
    if axis is None:
        return (1,) * len(shape)
    axes = {a % len(shape) for a in np.atleast_1d(axis)}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum(x, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    x = as_node(x)
    value = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = reshape(g, _keepdims_shape(x.shape, axis))
        return (broadcast_to(g, x.shape),)

    return _make(np.asarray(value), "sum", (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = as_node(x)
    count = x.value.size if axis is None else int(np.prod(
        [x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def dot(a, b) -> Node:
    return sum(mul(a, b))


def norm(x, axis: int = -1) -> Node:
    """L2 norm over ``axis``; zero vectors get a zero subgradient."""
    x = as_node(x)
    out = _make(np.sqrt(np.sum(x.value * x.value, axis=axis)), "norm", (x,), None)
    if out.requires_grad:
        zero = out.value == 0.0
        guard = constant(zero.astype(np.float64))
        keep = constant((~zero).astype(np.float64))
        expanded = _keepdims_shape(x.shape, axis)

        def vjp(g):
            factor = mul(div(g, add(out, guard)), keep)
            return (mul(x, reshape(factor, expanded)),)

        out.vjp = vjp
    return out


def softmax(x, axis: int = -1) -> Node:
    x = as_node(x)
    shifted = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = _make(e / e.sum(axis=axis, keepdims=True), "softmax", (x,), None)
    if out.requires_grad:
        out.vjp = lambda g: (mul(out, sub(g, sum(mul(g, out), axis=axis, keepdims=True))),)
    return out


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Node:
    x = as_node(x)
    shift = constant(np.max(x.value, axis=axis, keepdims=True))
    inner = log(sum(exp(sub(x, shift)), axis=axis, keepdims=True))
    out = add(inner, shift)
    if not keepdims:
        out = reshape(out, np.squeeze(out.value, axis=axis).shape)
    return out


def log_softmax(x, axis: int = -1) -> Node:
    x = as_node(x)
    return sub(x, logsumexp(x, axis=axis, keepdims=True))


# --- differentiation ------------------------------------------------------

def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack_: list[tuple[Node, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def gradient(output: Node, inputs: Sequence[Node],
             record_backward: bool = False) -> list[Node]:
    """Return d(output)/d(input) for each input, shape-matched.

    With ``record_backward`` the returned gradients are graph Nodes and can
    be fed into further differentiable computation. Inputs unreachable from
    ``output`` get zero gradients.
    """
    if output.value.size != 1 or output.ndim > 1:
        raise ContractViolation(f"gradient needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return [constant(np.zeros(x.shape)) for x in inputs]

    order = _toposort(output)
    targets = {id(x) for x in inputs}
    needed: dict[int, bool] = {}
    for node in order:
        needed[id(node)] = id(node) in targets or any(needed.get(id(p), False) for p in node.parents)

    grads: dict[int, Node] = {id(output): constant(np.ones(output.shape))}
    with recording(record_backward):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.vjp is None or not needed[id(node)]:
                continue
            for p, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not needed.get(id(p), False):
                    continue
                if np.isnan(pg.value).any():
                    raise NumericFault("NaN in backward pass", op=node.op)
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    return [grads.get(id(x)) or constant(np.zeros(x.shape)) for x in inputs]


def numeric_gradient(f: Callable[[Node], Node], point, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` over a flat parameter vector.

    Leaves are built with ``requires_grad`` so that ``f`` may take inner
    gradients of its argument.
    """
    point = np.array(point, dtype=np.float64).ravel()
    out = np.empty_like(point)
    for k in range(point.size):
        hi, lo = point.copy(), point.copy()
        hi[k] += step
        lo[k] -= step
        f_hi = f(Node(hi, requires_grad=True)).item()
        f_lo = f(Node(lo, requires_grad=True)).item()
        out[k] = (f_hi - f_lo) / (2.0 * step)
    return out


def finite_difference_check(f: Callable[[Node], Node], point, step: float = 1e-5) -> float:
    """Max relative error between autograd and central differences."""
    point = np.array(point, dtype=np.float64).ravel()
    leaf = Node(point.copy(), requires_grad=True)
    (analytic,) = gradient(f(leaf), [leaf])
    numeric = numeric_gradient(f, point, step)
    err = np.abs(analytic.value - numeric) / (np.abs(numeric) + 1e-12)
    if np.isnan(err).any():
        raise NumericFault("NaN in finite-difference check", op="finite_difference")
    return float(err.max()) if err.size else 0.0
