"""Minimal dense float32 tensors with reverse-mode autodiff.

Storage is always contiguous float32; matmul and the softmax/layernorm/sum
reductions accumulate in float64 before casting back. The computation graph
is implicit: each op node keeps references to its parents plus a closure that
pushes the output gradient into them. backward() runs an iterative
topological sort, so graphs of any depth are safe.

Broadcasting is deliberately narrow: scalars, plus numpy-style trailing-dim
alignment (including size-1 expansion). Anything else needs an explicit
reshape, which keeps every backward rule auditable.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An op precondition was violated (non-scalar loss, bad block id, ...)."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = ()
        self._backward_fn = None

    # --- basic introspection ---

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        """Accumulated gradient; zeros for leaves no path reached."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # --- graph plumbing ---

    def _accumulate(self, g: np.ndarray):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g.astype(np.float32, copy=False)

    def backward(self):
        """Reverse-mode sweep from a scalar loss into every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in order:
            if node._backward_fn is not None:
                node._backward_fn(node._grad)
                # free saved activations; grads on interior nodes are not needed
                node._backward_fn = None
                node._parents = ()
                if not node.requires_grad:
                    node._grad = None

    # --- operator sugar ---

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _toposort(root: Tensor):
    """Iterative post-order over the parent DAG, returned in reverse."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def make_node(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Create a graph node for a custom op.

    `backward_fn(grad)` must accumulate into each requires-grad parent via
    parent._accumulate. When grads are globally disabled or no parent needs
    them, a plain constant tensor is returned and backward_fn is dropped.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward_fn is not None for p in parents):
        out.requires_grad = False
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _needs_graph(parents) -> bool:
    return _GRAD_ENABLED and any(p.requires_grad or p._backward_fn is not None for p in parents)


def _check_broadcast(sa, sb):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise DimensionError(f"shapes {sa} and {sb} are not broadcast-compatible") from None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy trailing-dim broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise ops ---


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._backward_fn is not None:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._backward_fn is not None:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_node(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._backward_fn is not None:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._backward_fn is not None:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_node(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return make_node(-a.data, (a,), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        a._accumulate(g * np.float32(s))

    return make_node(a.data * np.float32(s), (a,), backward)


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return make_node(out_data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x), computed stably for either sign
    x = a.data
    out_data = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(np.float32)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        a._accumulate(g * sig)

    return make_node(out_data, (a,), backward)


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = (1.0 / (1.0 + np.exp(-x.astype(np.float64)))).astype(np.float32)
    out_data = x * sig

    def backward(g):
        a._accumulate(g * (sig * (1.0 + x * (1.0 - sig))))

    return make_node(out_data, (a,), backward)


# --- shape ops ---


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def backward(g):
        a._accumulate(g.reshape(old))

    return make_node(a.data.reshape(shape), (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        a._accumulate(np.swapaxes(g, ax1, ax2))

    return make_node(np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2)), (a,), backward)


def take_perm(a: Tensor, perm: np.ndarray, inv_perm: np.ndarray, axis: int) -> Tensor:
    """Permute slices along `axis`; backward uses the exact inverse (no scatter)."""
    if perm.shape != inv_perm.shape or a.shape[axis] != perm.shape[0]:
        raise DimensionError(
            f"permutation of length {perm.shape} does not match axis {axis} of {a.shape}")
    out_data = np.take(a.data, perm, axis=axis)

    def backward(g):
        a._accumulate(np.take(g, inv_perm, axis=axis))

    return make_node(out_data, (a,), backward)


def index_select(a: Tensor, idx: np.ndarray, axis: int = 0) -> Tensor:
    """Gather (possibly repeating) slices; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.take(a.data, idx, axis=axis)

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (slice(None),) * axis + (idx,), g)
        a._accumulate(acc)

    return make_node(out_data, (a,), backward)


# --- reductions ---


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape))

    return make_node(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --- contractions ---


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2])
    out_data = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64)).astype(np.float32)

    def backward(g):
        g64 = g.astype(np.float64)
        if a.requires_grad or a._backward_fn is not None:
            ga = np.matmul(g64, np.swapaxes(b.data.astype(np.float64), -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._backward_fn is not None:
            gb = np.matmul(np.swapaxes(a.data.astype(np.float64), -1, -2), g64)
            b._accumulate(_unbroadcast(gb, b.shape))

    return make_node(out_data, (a, b), backward)


# --- normalizations ---


def softmax_lastdim(x: Tensor, additive_mask=None) -> Tensor:
    """Row-wise softmax over the last dim, stabilized by max subtraction.

    `additive_mask` holds 0 for kept entries and -inf for masked ones and
    broadcasts over x. Rows that are fully masked come back as all zeros.
    """
    z = x.data.astype(np.float64)
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        _check_broadcast(x.shape, m.shape)
        z = z + m.astype(np.float64)
    zmax = np.max(z, axis=-1, keepdims=True)
    alive = np.isfinite(zmax)
    e = np.where(alive, np.exp(z - np.where(alive, zmax, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    y = np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0)
    out_data = y.astype(np.float32)

    def backward(g):
        g64 = g.astype(np.float64)
        inner = (g64 * out_data).sum(axis=-1, keepdims=True)
        x._accumulate(_unbroadcast((out_data * (g64 - inner)), x.shape))

    return make_node(out_data, (x,), backward)


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last dim; no affine (AdaLN supplies it)."""
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    out_data = xhat.astype(np.float32)

    def backward(g):
        g64 = g.astype(np.float64)
        n = x.shape[-1]
        gm = g64.mean(axis=-1, keepdims=True)
        gx = (g64 * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(((g64 - gm - xhat * gx) * inv))

    return make_node(out_data, (x,), backward)
