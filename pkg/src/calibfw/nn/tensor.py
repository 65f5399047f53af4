"""A small reverse-mode autodiff engine over numpy arrays.

Each op returns a :class:`Tensor` that remembers its parents and a closure
pushing the output gradient back to them. Graphs are only recorded when at
least one input requires a gradient and recording is enabled.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import as_strided

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


_KINK_LOG = None


@contextlib.contextmanager
def record_kinks():
    """Collect the branch decisions of piecewise ops (relu, max pool,
    smooth-L1) evaluated inside the block, as a list of bool arrays."""
    global _KINK_LOG
    prev, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


def _log_kink(decision):
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.asarray(decision))


class DegenerateFeatureError(ValueError):
    """A vector that must be normalized has zero length."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def has_graph(self) -> bool:
        return self._backward is not None or self.requires_grad

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if not self.has_graph:
            raise RuntimeError("tensor has no recorded graph to differentiate")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(grad)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root):
    order, seen = [], set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.has_graph for p in parents):
        out._parents = tuple(p for p in parents if p.has_graph)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        if a.has_graph:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.has_graph:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def neg(a):
    return _make(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        if a.has_graph:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.has_graph:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def relu(a):
    mask = a.data > 0
    _log_kink(mask)
    return _make(a.data * mask, (a,), lambda g: a._accumulate(g * mask))


def softplus(a):
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)
    sig = (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype)
    return _make(out, (a,), lambda g: a._accumulate(g * sig))


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), np.asarray(1.0 / n, a.dtype))


def take_rows(a, idx):
    """Rows ``a[idx]`` of a 2-D tensor; gradients scatter back to those rows."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(a.data[idx], (a,), backward)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        if a.has_graph:
            a._accumulate(g @ b.data.T)
        if b.has_graph:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias):
    """``x @ weight.T + bias`` for ``weight`` of shape (out, in)."""

    def backward(g):
        if x.has_graph:
            x._accumulate(g @ weight.data)
        if weight.has_graph:
            weight._accumulate(g.T @ x.data)
        if bias.has_graph:
            bias._accumulate(g.sum(axis=0))

    return _make(x.data @ weight.data.T + bias.data, (x, weight, bias), backward)


def l2_normalize(a, axis=-1):
    """Divide each vector along ``axis`` by its Euclidean norm."""
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateFeatureError("cannot normalize a zero-norm vector")
    y = x / norm

    def backward(g):
        proj = np.sum(g * y, axis=axis, keepdims=True)
        a._accumulate((g - y * proj) / norm)

    return _make(y, (a,), backward)


# ---------------------------------------------------------------- convolution
#
# Conv activations are channels-last (N, H, W, C) internally. Patches are
# gathered with one strided copy whose inner runs span (kx, C); the input
# gradient is scattered back from a channel-major layout so every add moves
# whole image rows.


def _im2col(x):
    """(N, H, W, C) -> (N*H*W, 9*C) zero-padded 3x3 patches in (ky, kx, C) order."""
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    sn, sh, sw, sc = xp.strides
    view = as_strided(xp, (n, h, w, 3, 3, c), (sn, sh, sw, sh, sw, sc), writeable=False)
    return np.ascontiguousarray(view).reshape(n * h * w, 9 * c)


def conv2d_3x3(x, weight, bias):
    """Same-padding 3x3 convolution of an (N, H, W, C) tensor by an (O, C, 3, 3) weight."""
    n, h, w, c = x.shape
    o = weight.shape[0]
    if weight.shape[1] != c:
        raise ValueError(f"conv expects {weight.shape[1]} input channels, got {c}")
    cols = _im2col(x.data)
    wm = weight.data.transpose(2, 3, 1, 0).reshape(9 * c, o)
    out = cols @ wm
    out += bias.data
    out = out.reshape(n, h, w, o)

    def backward(g):
        gm = g.reshape(n * h * w, o)
        if weight.has_graph:
            weight._accumulate((cols.T @ gm).reshape(3, 3, c, o).transpose(3, 2, 0, 1))
        if bias.has_graph:
            bias._accumulate(gm.sum(axis=0))
        if x.has_graph:
            dcols = (wm @ gm.T).reshape(3, 3, c, n, h, w)
            dxp = np.zeros((c, n, h + 2, w + 2), dtype=x.data.dtype)
            for ky in range(3):
                for kx in range(3):
                    dxp[:, :, ky:ky + h, kx:kx + w] += dcols[ky, kx]
            x._accumulate(dxp[:, :, 1:-1, 1:-1].transpose(1, 2, 3, 0))

    return _make(out, (x, weight, bias), backward)


def max_pool_2x2(x):
    """2x2 max pool of an (N, H, W, C) tensor. Ties send the gradient to the
    first maximal element in (0,0), (0,1), (1,0), (1,1) order."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max pool needs even spatial size, got {h}x{w}")
    v = x.data.reshape(n * h // 2, 2, w // 2, 2, c)
    corners = ((0, 0), (0, 1), (1, 0), (1, 1))
    quads = [v[:, i, :, j, :] for i, j in corners]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    if _KINK_LOG is not None:
        _log_kink(np.argmax(np.stack(quads), axis=0))

    def backward(g):
        g = g.reshape(out.shape)
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        gv = gx.reshape(v.shape)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), q in zip(corners, quads):
            m = q == out
            m &= ~taken
            taken |= m
            gv[:, i, :, j, :] = g * m
        x._accumulate(gx)

    return _make(out.reshape(n, h // 2, w // 2, c), (x,), backward)


def global_avg_pool(x):
    """Spatial mean of an (N, H, W, C) tensor -> (N, C)."""
    n, h, w, c = x.shape
    scale = np.asarray(1.0 / (h * w), dtype=x.dtype)

    def backward(g):
        x._accumulate(np.broadcast_to((g * scale)[:, None, None, :], x.shape))

    return _make(x.data.mean(axis=(1, 2)), (x,), backward)


def channels_last(x):
    """(N, C, H, W) -> (N, H, W, C)."""
    return _make(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)), (x,),
                 lambda g: x._accumulate(g.transpose(0, 3, 1, 2)))


# ---------------------------------------------------------------- losses


def smooth_l1(pred, target):
    """Mean over all elements of 0.5 d^2 (|d| < 1) or |d| - 0.5, d = target - pred."""
    pred = as_tensor(pred)
    target = as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = target.data - pred.data
    ad = np.abs(d)
    quad = ad < 1
    _log_kink(quad)
    value = np.where(quad, 0.5 * d * d, ad - 0.5).mean()
    scale = np.asarray(1.0 / d.size, dtype=pred.dtype)
    dd = np.where(quad, d, np.sign(d)) * scale  # dL/dd

    def backward(g):
        if pred.has_graph:
            pred._accumulate(-g * dd)
        if target.has_graph:
            target._accumulate(g * dd)

    return _make(np.asarray(value, dtype=pred.dtype), (pred, target), backward)
