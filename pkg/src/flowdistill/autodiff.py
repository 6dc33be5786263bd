"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an immutable-by-convention numpy array.  Operations on
tensors build an implicit acyclic graph through parent links; ``backward``
linearizes the graph reachable from a scalar loss into topological order
and visits each node exactly once in reverse, applying the chain rule.

Broadcasting follows numpy semantics everywhere it is allowed (add, sub,
mul and the batch dimensions of matmul): trailing axes are aligned, and
each pair of extents must be equal or contain a 1.  Incompatible shapes
raise :class:`ShapeError` naming the operation.  Gradients of broadcast
operands are summed back over the broadcast axes.

Precision is whatever dtype the arrays carry; 64-bit inputs give 64-bit
graphs (used for gradient verification), 32-bit for training.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an operation."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus the links needed for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic goes through the module-level ops
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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    """Create a leaf tensor, optionally casting to an explicit dtype."""
    arr = np.asarray(data, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return Tensor(arr, requires_grad=requires_grad)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(op, data, parents, backward) -> Tensor:
    """Wrap an op result, recording parents only when a gradient can flow."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, _parents=parents, _backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a_shape, b_shape):
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.data.dtype))
    b = _coerce(b, a)
    _check_broadcast("add", a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.data.dtype))
    b = _coerce(b, a)
    _check_broadcast("sub", a.shape, b.shape)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.data.dtype))
    b = _coerce(b, a)
    _check_broadcast("mul", a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy matmul semantics for stacked (batched) inputs.

    Both operands must have ndim >= 2; batch dimensions broadcast.
    """
    a, b = (a if isinstance(a, Tensor) else Tensor(a)), (b if isinstance(b, Tensor) else Tensor(b))
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _check_broadcast("matmul (batch dims)", a.shape[:-2], b.shape[:-2])
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if ga.shape != a.shape:
            ga = _unbroadcast(ga, a.shape)
        if gb.shape != b.shape:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make("transpose", out, (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}"
        ) from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make("concat", out, tuple(tensors), backward)


def take_rows(x: Tensor, indices) -> Tensor:
    """Select rows (axis 0) by integer index; unselected rows get zero gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {x.shape[0]} rows")
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("take_rows", out, (x,), backward)


def gather(x: Tensor, indices) -> Tensor:
    """Pick one entry per row of a 2-D tensor: out[i] = x[i, indices[i]]."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather: expected a 2-D tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather: index shape {idx.shape} does not match {x.shape[0]} rows")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _make("gather", out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", out, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        denom = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        denom = int(np.prod([x.data.shape[a] for a in axes]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / denom,)

    return _make("mean", out, (x,), backward)


def sumsq(x: Tensor) -> Tensor:
    """Sum of squared elements, as a scalar."""
    out = np.asarray((x.data * x.data).sum())

    def backward(g):
        return (2.0 * g * x.data,)

    return _make("sumsq", out, (x,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), using the error function."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make("gelu", out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale and shift.

    The variance is floored by ``eps``, so a zero-variance (constant) row
    normalizes to zeros and the output reduces to the bias.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.data.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return _make("layer_norm", out, (x, gain, bias), backward)


def conv1d_grouped(x: Tensor, w: Tensor, groups: int) -> Tensor:
    """Grouped 1-D convolution over a (L, d) sequence, same-length padding, no bias.

    The weight has shape (k, groups, d/groups, d/groups): tap, group,
    input channel within group, output channel within group.  The kernel
    width k must be odd.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"conv1d_grouped: expected (L, d) input, got {x.shape}")
    L, d = x.shape
    if d % groups != 0:
        raise ShapeError(f"conv1d_grouped: groups={groups} does not divide width {d}")
    cpg = d // groups
    k = w.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"conv1d_grouped: kernel width must be odd, got {k}")
    if w.shape != (k, groups, cpg, cpg):
        raise ShapeError(f"conv1d_grouped: weight {w.shape} != expected {(k, groups, cpg, cpg)}")
    pad = k // 2
    xp = np.zeros((L + k - 1, d), dtype=x.data.dtype)
    xp[pad : pad + L] = x.data
    xg = xp.reshape(L + k - 1, groups, cpg)
    out = np.zeros((L, groups, cpg), dtype=x.data.dtype)
    for j in range(k):
        out += np.einsum("lgc,gco->lgo", xg[j : j + L], w.data[j])

    def backward(g):
        go = g.reshape(L, groups, cpg)
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xg)
        for j in range(k):
            gw[j] = np.einsum("lgc,lgo->gco", xg[j : j + L], go)
            gxp[j : j + L] += np.einsum("lgo,gco->lgc", go, w.data[j])
        gx = gxp.reshape(L + k - 1, d)[pad : pad + L]
        return gx, gw

    return _make("conv1d_grouped", out.reshape(L, d), (x, w), backward)


# ---------------------------------------------------------------------------
# graph and backward pass


@dataclass
class Graph:
    """Topologically ordered view of the graph reachable from a root tensor."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes=order)


def backward(loss: Tensor, leaves=None):
    """Gradients of a scalar loss with respect to every reachable tensor.

    Returns a dict keyed by Tensor (identity).  Tensors passed in
    ``leaves`` are guaranteed an entry; those the loss does not depend on
    get zeros.  Each call allocates fresh gradient buffers, so running
    backward twice over the same graph yields identical results.  As a
    convenience the ``grad`` attribute of every tensor that requires a
    gradient is also (re)assigned.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = Graph.from_root(loss)
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.get(node)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent._parents):
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    if leaves is not None:
        for leaf in leaves:
            if leaf not in grads:
                grads[leaf] = np.zeros_like(leaf.data)
    for t, g in grads.items():
        if t.requires_grad:
            t.grad = g
    return grads
