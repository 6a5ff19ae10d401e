"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` is an append-only tape.  Operations on tensors that carry a
node on some graph are recorded there together with a closure computing the
vector-Jacobian product; operations on constant tensors run eagerly and record
nothing.  Recording order is a valid evaluation order, so ``backward`` walks
the tape once in reverse.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes, a scalar operand, or an operand whose shape equals the other's shape
with the leading (batch) dimension dropped.  Anything else must go through
:func:`broadcast` or :func:`reshape`.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DomainError, GradCheckError, NonFiniteError, ShapeError

__all__ = [
    "Graph",
    "Tensor",
    "as_tensor",
    "backward",
    "grad_check",
    "matmul",
    "add",
    "subtract",
    "multiply",
    "negate",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "log_sigmoid",
    "log1m_sigmoid",
    "relu",
    "square",
    "absolute",
    "clip",
    "sum",
    "mean",
    "broadcast",
    "reshape",
    "concat",
    "slice_",
    "stop_gradient",
]

_active: list["Graph"] = []


class Graph:
    """Append-only tape of primitive operations.

    Use as a context manager to make :meth:`Tensor.param` record leaves on
    this graph, or call :meth:`leaf` directly.
    """

    def __init__(self):
        self.ops: list[str] = []
        self.inputs: list[tuple] = []
        self._vjps: list = []
        self._shapes: list[tuple] = []

    def __len__(self):
        return len(self.ops)

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def leaf(self, value) -> "Tensor":
        """Record a differentiable leaf holding a copy of ``value``."""
        data = np.array(value, dtype=np.float64)
        _freeze_check("leaf", data)
        node = self._record("leaf", (), None, data.shape)
        return Tensor(data, node, self)

    def _record(self, op, inputs, vjp, shape):
        self.ops.append(op)
        self.inputs.append(inputs)
        self._vjps.append(vjp)
        self._shapes.append(shape)
        return len(self.ops) - 1

    def leaves(self):
        return [i for i, op in enumerate(self.ops) if op == "leaf"]

    def backward(self, root: "Tensor") -> dict[int, np.ndarray]:
        """Gradient of scalar ``root`` with respect to every recorded node.

        Leaves that do not influence ``root`` receive explicit zero arrays.
        """
        if root.graph is not self or root.node is None:
            raise ContractError("backward: root is not recorded on this graph")
        if root.data.shape != ():
            raise ContractError(f"backward: root must be a scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node: np.ones((), dtype=np.float64)}
        for node in range(root.node, -1, -1):
            g = grads.get(node)
            if g is None:
                continue
            vjp = self._vjps[node]
            if vjp is None:
                continue
            parents = self.inputs[node]
            for parent, pg in zip(parents, vjp(g)):
                if parent is None or pg is None:
                    continue
                prev = grads.get(parent)
                grads[parent] = pg if prev is None else prev + pg
        for node, op in enumerate(self.ops):
            if op == "leaf" and node not in grads:
                grads[node] = np.zeros(self._shapes[node])
        return grads

    def grad(self, root: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        """Convenience wrapper returning gradients aligned with ``wrt``."""
        grads = self.backward(root)
        out = []
        for t in wrt:
            if t.graph is not self or t.node is None:
                out.append(np.zeros(t.shape))
            else:
                out.append(np.asarray(grads.get(t.node, np.zeros(t.shape))))
        return out


def backward(graph: Graph, root: "Tensor") -> dict[int, np.ndarray]:
    """Functional alias of :meth:`Graph.backward`."""
    return graph.backward(root)


def _freeze_check(op, data):
    if not np.isfinite(data).all():
        raise NonFiniteError(op)


class Tensor:
    """Immutable float64 array with an optional handle into a graph."""

    __slots__ = ("data", "node", "graph")
    # Makes numpy defer mixed ndarray/Tensor arithmetic to the reflected methods.
    __array_ufunc__ = None

    def __init__(self, data, node=None, graph=None):
        if not isinstance(data, np.ndarray) or data.dtype != np.float64:
            data = np.array(data, dtype=np.float64)
        else:
            data = data.view()
        data.flags.writeable = False
        self.data = data
        self.node = node
        self.graph = graph

    @classmethod
    def param(cls, value) -> "Tensor":
        """Leaf on the innermost active graph."""
        if not _active:
            raise ContractError("Tensor.param called outside an active Graph")
        return _active[-1].leaf(value)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def requires_grad(self):
        return self.node is not None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: subtract(self, o)
    __rsub__ = lambda self, o: subtract(o, self)
    __mul__ = lambda self, o: multiply(self, o)
    __rmul__ = lambda self, o: multiply(o, self)
    __neg__ = lambda self: negate(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by Python scalars")
        return multiply(self, 1.0 / float(other))

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, detached from any graph."""
    return Tensor(x.data)


def _make(op, value, inputs, vjp):
    """Wrap ``value`` and record it if any input is on a graph."""
    if not np.isfinite(value).all():
        raise NonFiniteError(op)
    graph = None
    ids = []
    for t in inputs:
        if t.node is not None:
            if graph is None:
                graph = t.graph
            elif t.graph is not graph:
                raise ContractError(f"{op}: inputs belong to different graphs")
            ids.append(t.node)
        else:
            ids.append(None)
    if graph is None:
        return Tensor(value)
    node = graph._record(op, tuple(ids), vjp, value.shape)
    return Tensor(value, node, graph)


def _binary_shape(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if sb == () or (len(sa) >= 1 and sa[1:] == sb):
        return sa
    if sa == () or (len(sb) >= 1 and sb[1:] == sa):
        return sb
    raise ShapeError(op, sa, sb)


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if g.shape[1:] == shape:
        return g.sum(axis=0)
    return _unbroadcast(g, shape)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- binary ops -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    need_a, need_b = a.node is not None, b.node is not None

    def vjp(g):
        return (
            _reduce_to(g, sa) if need_a else None,
            _reduce_to(g, sb) if need_b else None,
        )

    return _make("add", a.data + b.data, (a, b), vjp)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("subtract", a, b)
    sa, sb = a.shape, b.shape
    need_a, need_b = a.node is not None, b.node is not None

    def vjp(g):
        return (
            _reduce_to(g, sa) if need_a else None,
            _reduce_to(-g, sb) if need_b else None,
        )

    return _make("subtract", a.data - b.data, (a, b), vjp)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("multiply", a, b)
    ad, bd = a.data, b.data
    need_a, need_b = a.node is not None, b.node is not None

    def vjp(g):
        return (
            _reduce_to(g * bd, ad.shape) if need_a else None,
            _reduce_to(g * ad, bd.shape) if need_b else None,
        )

    return _make("multiply", ad * bd, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    need_a, need_b = a.node is not None, b.node is not None

    def vjp(g):
        return (g @ bd.T if need_a else None, ad.T @ g if need_b else None)

    return _make("matmul", ad @ bd, (a, b), vjp)


# --- unary ops ------------------------------------------------------------


def negate(x) -> Tensor:
    x = as_tensor(x)
    return _make("negate", -x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if (xd <= 0).any():
        raise DomainError(f"log: {int((xd <= 0).sum())} nonpositive entries")
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = as_tensor(x)
    xd = x.data
    return _make("softplus", np.logaddexp(0.0, xd), (x,), lambda g: (g * expit(xd),))


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) computed as -softplus(-x)."""
    x = as_tensor(x)
    xd = x.data
    return _make("log_sigmoid", -np.logaddexp(0.0, -xd), (x,), lambda g: (g * expit(-xd),))


def log1m_sigmoid(x) -> Tensor:
    """log(1 - sigmoid(x)) computed as -softplus(x)."""
    x = as_tensor(x)
    xd = x.data
    return _make("log1m_sigmoid", -np.logaddexp(0.0, xd), (x,), lambda g: (-g * expit(xd),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make("absolute", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is identity strictly inside the range."""
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make("clip", np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# --- reductions and structure ---------------------------------------------


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    if axis is not None and not -len(shape) <= axis < len(shape):
        raise ShapeError("sum", shape, detail=f"axis {axis}")

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _make("sum", np.asarray(x.data.sum(axis=axis)), (x,), vjp)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        n = x.data.size
    else:
        if not -len(shape) <= axis < len(shape):
            raise ShapeError("mean", shape, detail=f"axis {axis}")
        n = shape[axis]
    if n == 0:
        raise ShapeError("mean", shape, detail="empty reduction")

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape),)

    return _make("mean", np.asarray(x.data.mean(axis=axis)), (x,), vjp)


def broadcast(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", src, shape) from None
    return _make("broadcast", out, (x,), lambda g: (_unbroadcast(g, src),))


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat: no inputs")
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref):
            raise ShapeError("concat", ts[0].shape, t.shape)
        ax = axis % len(ref)
        if other[:ax] + other[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", ts[0].shape, t.shape)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    needs = [t.node is not None for t in ts]

    def vjp(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))

    return _make("concat", out, ts, vjp)


def slice_(x, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)
    shape = x.shape
    try:
        out = np.array(x.data[key])
    except IndexError:
        raise ShapeError("slice", shape, detail=f"index {key!r}") from None

    def vjp(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _make("slice", out, (x,), vjp)


# --- finite-difference check ----------------------------------------------


def grad_check(
    fn: Callable[..., Tensor],
    params: Sequence[np.ndarray],
    eps: float = 1e-6,
) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` receives one tensor per entry of ``params`` and must return a
    scalar tensor.  The error per coordinate is
    ``|autodiff - fd| / max(1, |fd|)``.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    graph = Graph()
    leaves = [graph.leaf(p) for p in params]
    grads = graph.grad(fn(*leaves), leaves)

    worst = 0.0
    for i, p in enumerate(params):
        flat = p.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            probes = []
            for step in (eps, -eps):
                flat[j] = old + step
                try:
                    val = fn(*[Tensor(q) for q in params]).item()
                except (NonFiniteError, DomainError) as err:
                    flat[j] = old
                    raise GradCheckError(i, j, str(err)) from err
                if not math.isfinite(val):
                    flat[j] = old
                    raise GradCheckError(i, j)
                probes.append(val)
            flat[j] = old
            fd = (probes[0] - probes[1]) / (2.0 * eps)
            ad = grads[i].reshape(-1)[j]
            worst = max(worst, abs(ad - fd) / max(1.0, abs(fd)))
    return worst
