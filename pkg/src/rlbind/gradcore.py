"""Dense float64 tensors with tape-ordered reverse-mode differentiation.

Every primitive creates a node stamped with a global, monotonically increasing
sequence number.  ``backward`` collects the nodes reachable from the loss and
replays them in exactly reverse recording order, then marks them consumed so a
second pass over the same recording fails loudly.

Conventions worth knowing:

* ``sign(0) == 0`` and ``abs`` has zero subgradient at 0.
* ``clamp`` passes the gradient through inside the closed interval and blocks
  it outside.
* ``l2_norm`` has zero gradient at the origin.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_seq = itertools.count()
_state = threading.local()


class GradError(RuntimeError):
    """Misuse of the differentiation machinery (detached graph, double backward...)."""


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DegenerateVectorError(ValueError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    seq: int
    parents: tuple
    vjp: Callable | None
    consumed: bool = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ----------------------------------------------------------------------
# recording
# ----------------------------------------------------------------------


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: non-finite value in output")


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check_finite(op, out)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.node = None
    t.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        for p in parents:
            if p.node is not None and p.node.consumed:
                raise GradError(f"{op}: input was produced by a graph that has already been backpropagated")
        t.requires_grad = True
        t.node = Node(op, next(_seq), tuple(parents), vjp)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(
        "mul", ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a, b) -> Tensor:
    """``a @ b`` for 1-D/2-D operands, or a stacked ``(..., m, k)`` left operand."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim not in (1, 2) or a.ndim < 1:
        raise ShapeError(f"matmul: unsupported shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
        elif ad.ndim == 1:
            ga = g @ bd.T
            gb = np.outer(ad, g)
        else:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make("log", out, (a,), lambda g: (g / ad,))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum", np.asarray(out, dtype=DTYPE), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    n = a.data.size if axis is None else np.prod([src[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _make("mean", np.asarray(out, dtype=DTYPE), (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; invariant to adding a constant along ``axis``."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """``log(softmax(a))`` fused through log-sum-exp so it never takes log(0)."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), vjp)


def l2_norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    ad = a.data
    nrm = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    out = nrm if keepdims else np.squeeze(nrm, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(nrm > 0, nrm, 1.0)
        return (np.where(nrm > 0, g * ad / safe, 0.0),)

    return _make("l2_norm", out, (a,), vjp)


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad ** p
    if p == 2.0:
        return _make("power", out, (a,), lambda g: (2.0 * g * ad,))

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * p * ad ** (p - 1.0),)

    return _make("power", out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tuple(tensors), vjp)


def slice_(a: Tensor, idx) -> Tensor:
    src = a.shape
    out = np.array(a.data[idx], dtype=DTYPE)

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make("slice", out, (a,), vjp)


def clamp(a: Tensor, lo, hi) -> Tensor:
    lo_arr = np.asarray(lo, dtype=DTYPE)
    hi_arr = np.asarray(hi, dtype=DTYPE)
    inside = (a.data >= lo_arr) & (a.data <= hi_arr)
    out = np.minimum(np.maximum(a.data, lo_arr), hi_arr)
    return _make("clamp", out, (a,), lambda g: (g * inside,))


def sign(a: Tensor) -> Tensor:
    return _make("sign", np.sign(a.data), (a,), lambda g: (np.zeros_like(g),))


# ----------------------------------------------------------------------
# composites
# ----------------------------------------------------------------------


def sub(a, b) -> Tensor:
    return as_tensor(a) - b


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max written as (a + b + |a - b|) / 2; ties split the gradient."""
    return (a + b + abs_(a - b)) * 0.5


def l2_normalize(e: Tensor, axis: int = -1, tol: float = 1e-12) -> Tensor:
    e = as_tensor(e)
    nrm = l2_norm(e, axis=axis, keepdims=True)
    if np.any(nrm.data <= tol):
        raise DegenerateVectorError(f"l2_normalize: vector norm {nrm.data.min():.3e} is below {tol:g}")
    return e * power(nrm, -1.0)


# ----------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------


@dataclass
class Graph:
    """The ordered list of primitive nodes a loss depends on."""

    nodes: list = field(default_factory=list)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def trace(loss: Tensor) -> Graph:
    """Nodes reachable from ``loss`` in recording order."""
    seen: dict[int, Node] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        n = t.node
        if n is None or id(n) in seen:
            continue
        seen[id(n)] = n
        stack.extend(n.parents)
    return Graph(sorted(seen.values(), key=lambda n: n.seq))


def _run(loss: Tensor) -> tuple[dict[int, np.ndarray], dict[int, Tensor]]:
    if loss.data.size != 1:
        raise GradError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        return {}, {}
    graph = trace(loss)
    if any(n.consumed for n in graph.nodes):
        raise GradError("backward: this graph has already been backpropagated; re-run the forward pass")
    producer: dict[int, Tensor] = {id(loss.node): loss}
    for node in graph.nodes:
        for p in node.parents:
            if p.node is not None:
                producer[id(p.node)] = p

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(producer[id(node)]), None)
        vjp, node.vjp = node.vjp, None
        node.consumed = True
        if g is None:
            continue
        for p, gp in zip(node.parents, vjp(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            if p.node is None:
                leaves[key] = p
                leaf_grads[key] = gp if key not in leaf_grads else leaf_grads[key] + gp
            else:
                grads[key] = gp if key not in grads else grads[key] + gp
    return leaf_grads, leaves


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves listed in ``leaves`` that the loss does not depend on get a zero
    gradient instead of staying ``None``.
    """
    leaf_grads, owners = _run(loss)
    for key, g in leaf_grads.items():
        leaf = owners[key]
        g = np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for leaf in leaves or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt`` without touching any ``.grad`` field."""
    leaf_grads, _ = _run(loss)
    out = []
    for t in wrt:
        g = leaf_grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(t.shape))
    return out


# ----------------------------------------------------------------------
# finite differences
# ----------------------------------------------------------------------


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. the entries of ``x``."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            out.reshape(-1)[i] = (hi - lo) / (2.0 * step)
    return out


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    rtol: float = 1e-4,
    atol: float = 1e-8,
    step: float = 1e-5,
) -> float:
    """Compare analytic and central-difference gradients.

    An entry passes when its absolute error is below ``atol`` or its error
    relative to ``max(|analytic|, |numeric|)`` is below ``rtol``.  Returns the
    worst relative error among entries above the absolute floor; raises
    ``AssertionError`` on failure.
    """
    analytic = grad(fn(), inputs)
    worst = 0.0
    for x, a in zip(inputs, analytic):
        n = numeric_grad(fn, x, step)
        err = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        rel = np.where(err > atol, err / np.where(scale > 0, scale, 1.0), 0.0)
        worst = max(worst, float(rel.max(initial=0.0)))
        if worst > rtol:
            i = int(np.argmax(rel))
            raise AssertionError(
                f"gradient mismatch for input of shape {x.shape} at flat index {i}: "
                f"analytic={a.reshape(-1)[i]!r} numeric={n.reshape(-1)[i]!r}"
            )
    return worst
