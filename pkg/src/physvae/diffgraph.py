"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Node` wraps a numpy array. Every operator in this module returns a
new Node that remembers its parents together with the vector-Jacobian product
(VJP) of the operation. Calling :func:`backward` on a scalar Node walks the
graph in reverse topological order and accumulates ``grad`` on every ancestor
that requires it.

Graphs are meant to be rebuilt for every evaluation; a graph can only be
back-propagated once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ABS_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operator."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the operator."""


class ContractError(RuntimeError):
    """A precondition of the graph API was violated."""


class GraphReuseError(RuntimeError):
    """``backward`` was called twice on the same graph."""


class Node:
    __slots__ = ("value", "requires_grad", "grad", "_parents", "_consumed")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        # sequence of (parent Node, vjp callable mapping output grad -> parent grad)
        self._parents = tuple(parents)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.value)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.size == 1 else float(self.value)

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def variable(x) -> Node:
    return Node(np.array(x, dtype=np.float64), requires_grad=True)


def _make(value, *pairs) -> Node:
    """Build an output node; ``pairs`` are (parent, vjp) tuples."""
    live = tuple((p, f) for p, f in pairs if p.requires_grad)
    return Node(value, requires_grad=bool(live), parents=live)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Node, b: Node, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "sub")
    return _make(
        a.value - b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "mul")
    return _make(
        a.value * b.value,
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "div")
    out = a.value / b.value
    return _make(
        out,
        (a, lambda g: _unbroadcast(g / b.value, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.value, b.shape)),
    )


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a, lambda g: -g))


def square(a) -> Node:
    a = as_node(a)
    return _make(a.value * a.value, (a, lambda g: 2.0 * a.value * g))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a, lambda g: g * out))


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0.0):
        raise DomainError(f"log: input has non-positive entries (min {a.value.min():g})")
    return _make(np.log(a.value), (a, lambda g: g / a.value))


def sqrt(a) -> Node:
    a = as_node(a)
    if np.any(a.value < 0.0):
        raise DomainError(f"sqrt: input has negative entries (min {a.value.min():g})")
    out = np.sqrt(a.value)
    return _make(out, (a, lambda g: 0.5 * g / out))


def abs_smooth(a, eps: float = ABS_EPS) -> Node:
    """sqrt(x**2 + eps): an absolute value with a derivative at zero."""
    a = as_node(a)
    out = np.sqrt(a.value * a.value + eps)
    return _make(out, (a, lambda g: g * a.value / out))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)

    def vjp(g):
        r = out * out
        np.subtract(1.0, r, out=r)
        r *= g
        return r

    return _make(out, (a, vjp))


def sigmoid(a) -> Node:
    a = as_node(a)
    x = a.value
    # numerically stable logistic
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a, lambda g: g * out * (1.0 - out)))


def softplus(a) -> Node:
    a = as_node(a)
    x = a.value
    out = np.logaddexp(0.0, x)
    return _make(out, (a, lambda g: g / (1.0 + np.exp(-x))))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0.0
    return _make(np.where(mask, a.value, 0.0), (a, lambda g: g * mask))


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    a = as_node(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a, lambda g: g * mask))


def detach(a) -> Node:
    a = as_node(a)
    return Node(a.value.copy(), requires_grad=False)


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, a.shape).copy()

    return _make(out, (a, vjp))


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def _extreme(a, pick) -> Node:
    a = as_node(a)
    flat = int(pick(a.value))
    out = a.value.reshape(-1)[flat]

    def vjp(g):
        # subgradient: all of it goes to the first extremal element
        grad = np.zeros(a.size)
        grad[flat] = g
        return grad.reshape(a.shape)

    return _make(np.asarray(out), (a, vjp))


def amax(a) -> Node:
    """Maximum over all elements."""
    return _extreme(a, np.argmax)


def amin(a) -> Node:
    """Minimum over all elements."""
    return _extreme(a, np.argmin)


# ------------------------------------------------------------------ structure


def reshape(a, shape) -> Node:
    a = as_node(a)
    shape = tuple(shape)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a, lambda g: g.reshape(a.shape)))


def transpose(a) -> Node:
    a = as_node(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2D operand, got shape {a.shape}")
    return _make(a.value.T, (a, lambda g: g.T))


def getitem(a, index) -> Node:
    a = as_node(a)
    out = a.value[index]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return full

    return _make(np.array(out, dtype=np.float64), (a, vjp))


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat: no operands")
    ref = nodes[0].shape
    ax = axis % len(ref)
    for n in nodes[1:]:
        if len(n.shape) != len(ref) or any(
            n.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {n.shape} do not conform on axis {axis}")
    out = np.concatenate([n.value for n in nodes], axis=ax)
    bounds = np.cumsum([0] + [n.shape[ax] for n in nodes])

    def piece(i):
        sl = [slice(None)] * len(ref)
        sl[ax] = slice(bounds[i], bounds[i + 1])
        return lambda g: g[tuple(sl)]

    return _make(out, *[(n, piece(i)) for i, n in enumerate(nodes)])


# -------------------------------------------------------------- linear algebra


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _make(
        a.value @ b.value,
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    )


# ------------------------------------------------------------------- images


def _reflect_index(h: int, w: int, r: int) -> np.ndarray:
    return np.pad(np.arange(h * w).reshape(h, w), r, mode="reflect")


def reflect_pad(a, r: int) -> Node:
    """Mirror-pad a 2D node by ``r`` pixels (edge pixel not repeated)."""
    a = as_node(a)
    if a.ndim != 2:
        raise ShapeError(f"reflect_pad: expected a 2D operand, got shape {a.shape}")
    h, w = a.shape
    if r >= h or r >= w:
        raise ShapeError(f"reflect_pad: pad {r} too large for shape {a.shape}")
    idx = _reflect_index(h, w, r)

    def vjp(g):
        return np.bincount(idx.ravel(), weights=g.ravel(), minlength=h * w).reshape(h, w)

    return _make(a.value.ravel()[idx], (a, vjp))


def conv2d_3x3(a, kernel) -> Node:
    """2D cross-correlation with a fixed 3x3 kernel and reflect padding.

    ``out[i, j] = sum_{u,v} kernel[u, v] * padded[i + u, j + v]`` so the
    output has the input's shape.
    """
    a = as_node(a)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != (3, 3):
        raise ShapeError(f"conv2d_3x3: kernel shape {kernel.shape} is not (3, 3)")
    if a.ndim != 2 or a.shape[0] < 3 or a.shape[1] < 3:
        raise ShapeError(f"conv2d_3x3: operand shape {a.shape} smaller than kernel (3, 3)")
    h, w = a.shape
    idx = _reflect_index(h, w, 1)
    padded = a.value.ravel()[idx]
    out = np.zeros((h, w))
    for u in range(3):
        for v in range(3):
            if kernel[u, v] != 0.0:
                out += kernel[u, v] * padded[u : u + h, v : v + w]

    def vjp(g):
        gp = np.zeros((h + 2, w + 2))
        for u in range(3):
            for v in range(3):
                if kernel[u, v] != 0.0:
                    gp[u : u + h, v : v + w] += kernel[u, v] * g
        return np.bincount(idx.ravel(), weights=gp.ravel(), minlength=h * w).reshape(h, w)

    return _make(out, (a, vjp))


# ------------------------------------------------------------------ backward


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
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


def backward(root: Node) -> None:
    """Populate ``grad`` on every ancestor of ``root`` that requires it."""
    if root.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    if root._consumed:
        raise GraphReuseError("backward: this graph has already been back-propagated")
    root._consumed = True
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        if node is root or node.requires_grad:
            node.grad = g
        for parent, vjp in node._parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e <= self.tol for e in self.max_rel_error)


def grad_check(
    f: Callable[..., Node],
    inputs: Sequence[np.ndarray],
    h: float = 1e-4,
    tol: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` receives one Node per input and must return a scalar Node.
    Relative error uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    nodes = [variable(x) for x in arrays]
    out = f(*nodes)
    backward(out)
    errors = []
    for k, x in enumerate(arrays):
        analytic = nodes[k].grad if nodes[k].grad is not None else np.zeros_like(x)
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*[constant(a) for a in arrays]).item()
            flat[i] = orig - h
            fm = f(*[constant(a) for a in arrays]).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        errors.append(float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0)
    return GradCheckReport(errors, tol)
