"""Reverse-mode autodiff tensor with a small, individually verifiable op set.

Tensors wrap contiguous float64 numpy arrays.  Each non-leaf tensor records
its parents and a backward closure; calling :meth:`Tensor.backward` on a
scalar output topologically sorts the recorded graph and accumulates exact
analytic gradients into every tensor with ``requires_grad`` set.

Elementwise arithmetic requires identical shapes or a size-1 operand
(scalar broadcasting only).  Larger broadcasts are expressed explicitly
with ``gather``/``reshape``/``matmul`` so every backward rule stays simple
to audit.
"""

from __future__ import annotations

import numpy as np

from ..errors import DomainError
from ..kernels import conv as conv_kernels
from ..kernels import sampling


def _as_array(data) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, op: str = "leaf"):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._backward_fn = backward

    # -- construction helpers ------------------------------------------------
    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(data, requires_grad=True)

    @staticmethod
    def const(data) -> "Tensor":
        return Tensor(data, requires_grad=False)

    # -- basics ---------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DomainError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- graph machinery -------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = g.reshape(self.data.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DomainError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad)
        order = _toposort(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operators --------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        if p == 2:
            return mul(self, self)
        raise DomainError("only squaring is supported")

    # -- op methods ---------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def tanh(self):
        return ttanh(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _toposort(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def graph_records(root: Tensor):
    """Topologically ordered (op, parent_ids, node_id) records ending at root."""
    return [(n.op, tuple(id(p) for p in n._parents), id(n)) for n in _toposort(root)]


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _needs(*tensors) -> bool:
    return any(t.requires_grad for t in tensors)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise DomainError(
        f"{op}: shapes {a.data.shape} and {b.data.shape} differ "
        "(only scalar broadcasting is supported)"
    )


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Collapse a broadcasted gradient back to a size-1 operand's shape."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


# -- arithmetic -------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=_needs(a, b), parents=(a, b), op="add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.data.shape))

    out._backward_fn = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "sub")
    out = Tensor(a.data - b.data, requires_grad=_needs(a, b), parents=(a, b), op="sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g, b.data.shape))

    out._backward_fn = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=_needs(a, b), parents=(a, b), op="mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.data.shape))

    out._backward_fn = backward
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "div")
    out = Tensor(a.data / b.data, requires_grad=_needs(a, b), parents=(a, b), op="div")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward_fn = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DomainError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_needs(a, b), parents=(a, b), op="matmul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward_fn = backward
    return out


# -- elementwise nonlinearities ------------------------------------------------


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    # maximum (not where) so NaN propagates instead of being masked to zero.
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=a.requires_grad, parents=(a,), op="relu")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    out._backward_fn = backward
    return out


def texp(a) -> Tensor:
    a = _wrap(a)
    value = np.exp(a.data)
    out = Tensor(value, requires_grad=a.requires_grad, parents=(a,), op="exp")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * value)

    out._backward_fn = backward
    return out


def tlog(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.log(a.data), requires_grad=a.requires_grad, parents=(a,), op="log")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    out._backward_fn = backward
    return out


def ttanh(a) -> Tensor:
    a = _wrap(a)
    value = np.tanh(a.data)
    out = Tensor(value, requires_grad=a.requires_grad, parents=(a,), op="tanh")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - value * value))

    out._backward_fn = backward
    return out


def sigmoid(a) -> Tensor:
    """Composite logistic function 1 / (1 + exp(-x))."""
    a = _wrap(a)
    return div(1.0, add(1.0, texp(mul(a, -1.0))))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    if not lo < hi:
        raise DomainError("clamp needs lo < hi")
    mask = (a.data >= lo) & (a.data <= hi)
    out = Tensor(np.clip(a.data, lo, hi), requires_grad=a.requires_grad, parents=(a,), op="clamp")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    out._backward_fn = backward
    return out


# -- reductions -----------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = Tensor(
        np.sum(a.data, axis=axis, keepdims=keepdims),
        requires_grad=a.requires_grad,
        parents=(a,),
        op="sum",
    )

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(_expand_reduced(g, a.data.shape, axis, keepdims)))

    out._backward_fn = backward
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(out_data.size, 1)
    out = Tensor(out_data, requires_grad=a.requires_grad, parents=(a,), op="mean")

    def backward(g):
        if a.requires_grad:
            a._accumulate(
                np.ascontiguousarray(_expand_reduced(g, a.data.shape, axis, keepdims)) / count
            )

    out._backward_fn = backward
    return out


# -- structure ---------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad, parents=(a,), op="reshape")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    out._backward_fn = backward
    return out


def permute(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(
        np.ascontiguousarray(a.data.transpose(axes)),
        requires_grad=a.requires_grad,
        parents=(a,),
        op="permute",
    )

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(g.transpose(inverse)))

    out._backward_fn = backward
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise DomainError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(data, requires_grad=_needs(*tensors), parents=tuple(tensors), op="concat")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(np.ascontiguousarray(g[tuple(sl)]))

    out._backward_fn = backward
    return out


# -- indexing -----------------------------------------------------------------------


def gather(a, index) -> Tensor:
    """Select rows along axis 0: out[i] = a[index[i]]."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise DomainError("gather index must be a 1-D integer array")
    if index.size and (index.min() < 0 or index.max() >= a.data.shape[0]):
        raise DomainError("gather index out of range")
    out = Tensor(a.data[index], requires_grad=a.requires_grad, parents=(a,), op="gather")

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, index, g)
            a._accumulate(acc)

    out._backward_fn = backward
    return out


def scatter_add(base, index, src) -> Tensor:
    """out = base with out[index[i]] += src[i] (duplicate indices accumulate)."""
    base, src = _wrap(base), _wrap(src)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or index.shape[0] != src.data.shape[0]:
        raise DomainError("scatter_add index must be 1-D and match src rows")
    if index.size and (index.min() < 0 or index.max() >= base.data.shape[0]):
        raise DomainError("scatter_add index out of range")
    if base.data.shape[1:] != src.data.shape[1:]:
        raise DomainError("scatter_add base/src trailing shapes differ")
    data = base.data.copy()
    np.add.at(data, index, src.data)
    out = Tensor(data, requires_grad=_needs(base, src), parents=(base, src), op="scatter_add")

    def backward(g):
        if base.requires_grad:
            base._accumulate(g)
        if src.requires_grad:
            src._accumulate(np.ascontiguousarray(g[index]))

    out._backward_fn = backward
    return out


# -- domain-specific ops -----------------------------------------------------------


def conv2d(x, w) -> Tensor:
    """3x3, stride-1, zero-pad-1 convolution of (C_in, H, W) with (C_out, C_in, 3, 3)."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 3 or w.data.ndim != 4 or w.data.shape[1:] != (x.data.shape[0], 3, 3):
        raise DomainError(f"conv2d: bad shapes {x.data.shape}, {w.data.shape}")
    out = Tensor(
        conv_kernels.conv2d_forward(x.data, w.data),
        requires_grad=_needs(x, w),
        parents=(x, w),
        op="conv2d",
    )

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accumulate(conv_kernels.conv2d_grad_input(g, w.data))
        if w.requires_grad:
            w._accumulate(conv_kernels.conv2d_grad_weights(x.data, g, w.data.shape))

    out._backward_fn = backward
    return out


def conv3d(x, w) -> Tensor:
    """3x3x3, stride-1, zero-pad-1 convolution of (C_in, X, Y, Z) volumes."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 5 or w.data.shape[1:] != (x.data.shape[0], 3, 3, 3):
        raise DomainError(f"conv3d: bad shapes {x.data.shape}, {w.data.shape}")
    out = Tensor(
        conv_kernels.conv3d_forward(x.data, w.data),
        requires_grad=_needs(x, w),
        parents=(x, w),
        op="conv3d",
    )

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accumulate(conv_kernels.conv3d_grad_input(g, w.data))
        if w.requires_grad:
            w._accumulate(conv_kernels.conv3d_grad_weights(x.data, g, w.data.shape))

    out._backward_fn = backward
    return out


def trilinear_sample(vol, pts) -> Tensor:
    """Sample a (X, Y, Z, C) volume tensor at fixed (N, 3) center coordinates.

    Differentiable with respect to the volume values only; the sample
    positions act as fixed quadrature nodes.
    """
    vol = _wrap(vol)
    pts = np.ascontiguousarray(np.asarray(pts, dtype=np.float64))
    if vol.data.ndim != 4 or pts.ndim != 2 or pts.shape[1] != 3:
        raise DomainError("trilinear_sample needs a (X,Y,Z,C) volume and (N,3) points")
    out = Tensor(
        sampling.trilinear_forward(vol.data, pts),
        requires_grad=vol.requires_grad,
        parents=(vol,),
        op="trilinear_sample",
    )

    def backward(g):
        if vol.requires_grad:
            vol._accumulate(sampling.trilinear_backward(np.ascontiguousarray(g), pts, vol.data.shape))

    out._backward_fn = backward
    return out


def dropout(a, rate: float, seed: int) -> Tensor:
    """Zero activations with probability ``rate``; scale survivors by 1/(1-rate)."""
    a = _wrap(a)
    if not 0.0 <= rate < 1.0:
        raise DomainError("dropout rate must lie in [0, 1)")
    if rate == 0.0:
        return a
    rng = np.random.default_rng(seed)
    keep = rng.random(a.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = Tensor(
        np.where(keep, a.data * scale, 0.0),
        requires_grad=a.requires_grad,
        parents=(a,),
        op="dropout",
    )

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * keep * scale)

    out._backward_fn = backward
    return out


def affine(x, weight, bias) -> Tensor:
    """x @ weight + bias, with the (1, F) bias row expanded via matmul."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if bias.data.ndim != 2 or bias.data.shape[0] != 1:
        raise DomainError("bias must have shape (1, F)")
    ones = Tensor(np.ones((x.data.shape[0], 1)))
    return add(matmul(x, weight), matmul(ones, bias))
