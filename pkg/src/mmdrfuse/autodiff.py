"""Reverse-mode autodiff tape over the ops kernels.

A Tensor wraps a numpy array plus an optional backward closure. Graphs are
built only where a differentiable input actually requires gradients, so
running the same code on constants costs nothing extra. The op set is the
minimum the training objective needs, nothing general-purpose.
"""

import numpy as np

from . import ops

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, _prev=()):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad and _grad_enabled
        self._backward = None
        self._prev = _prev if self.requires_grad else ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, self.data.dtype) if np.isscalar(g) else g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Single-shot: after the pass the graph is dismantled (closures,
        parent links and intermediate gradients dropped) so its buffers free
        immediately instead of waiting on cycle collection. Leaf gradients
        survive for the optimizer."""
        if self.data.ndim != 0:
            raise ValueError("backward() expects a scalar loss tensor")
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            stack.append((t, True))
            stack.extend((p, False) for p in t._prev)
        self.grad = np.ones((), self.data.dtype)
        for t in reversed(topo):
            if t._backward is not None:
                t._backward()
        for t in topo:
            if t._backward is not None:
                t._backward = None
                t._prev = ()
                if t is not self:
                    t.grad = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if not isinstance(other, Tensor):
            out = Tensor(self.data + other, self.requires_grad, (self,))
            if out.requires_grad:
                out._backward = lambda: self._accum(out.grad)
            return out
        out = Tensor(self.data + other.data,
                     self.requires_grad or other.requires_grad, (self, other))
        if out.requires_grad:
            def back():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad, other.data.shape))
            out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, self.requires_grad, (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(-out.grad)
        return out

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            k = np.asarray(other, self.data.dtype)
            out = Tensor(self.data * k, self.requires_grad, (self,))
            if out.requires_grad:
                out._backward = lambda: self._accum(_unbroadcast(out.grad * k, self.data.shape))
            return out
        out = Tensor(self.data * other.data,
                     self.requires_grad or other.requires_grad, (self, other))
        if out.requires_grad:
            def back():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad * self.data, other.data.shape))
            out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor):
            return self * (1.0 / np.asarray(other, self.data.dtype))
        out = Tensor(self.data / other.data,
                     self.requires_grad or other.requires_grad, (self, other))
        if out.requires_grad:
            def back():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad / other.data, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(
                        -out.grad * self.data / (other.data * other.data),
                        other.data.shape))
            out._backward = back
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], self.requires_grad, (self,))
        if out.requires_grad:
            def back():
                g = np.zeros_like(self.data)
                g[key] = out.grad
                self._accum(g)
            out._backward = back
        return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unary(x, data, grad_fn):
    out = Tensor(data, x.requires_grad, (x,))
    if out.requires_grad:
        out._backward = lambda: x._accum(grad_fn(out.grad))
    return out


# -- reshaping / reductions --------------------------------------------------

def reshape(x, shape):
    return _unary(x, x.data.reshape(shape),
                  lambda g: g.reshape(x.data.shape))


def tsum(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=True)
        ge = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(ge, x.data.shape).astype(x.data.dtype, copy=True)

    return _unary(x, data, grad_fn)


def tmean(x):
    n = x.data.size
    if n == 0:
        raise ValueError("mean of an empty tensor")
    return tsum(x) / float(n)


def mean_abs(x):
    """L1 mean: sum|x| / count. Subgradient at 0 is 0 (np.sign convention)."""
    return tsum(tabs(x)) / float(x.data.size)


def mean_sq(x):
    return tsum(square(x)) / float(x.data.size)


def square(x):
    return _unary(x, x.data * x.data, lambda g: g * (2.0 * x.data))


def tabs(x):
    return _unary(x, np.abs(x.data), lambda g: g * np.sign(x.data))


def tsqrt(x):
    data = np.sqrt(x.data)
    return _unary(x, data, lambda g: g * (0.5 / data))


def l2_norm(x, eps=0.0):
    """Euclidean norm of the flattened tensor.

    eps is added under the root so the gradient stays finite at the origin.
    """
    s = tsum(square(x))
    if eps:
        s = s + eps
    return tsqrt(s)


def channel_sum(x):
    """Sum over the channel axis, keepdims. (N,C,H,W) -> (N,1,H,W)."""
    return tsum(x, axis=1, keepdims=True)


def concat_channels(xs):
    datas = [t.data for t in xs]
    req = any(t.requires_grad for t in xs)
    out = Tensor(np.concatenate(datas, axis=1), req, tuple(xs))
    if out.requires_grad:
        splits = np.cumsum([d.shape[1] for d in datas])[:-1]

        def back():
            parts = np.split(out.grad, splits, axis=1)
            for t, g in zip(xs, parts):
                if t.requires_grad:
                    t._accum(np.ascontiguousarray(g))
        out._backward = back
    return out


# -- neural ops ---------------------------------------------------------------

def conv2d(x, w, b=None, pad=None):
    """Stride-1 cross-correlation with optional fused same-padding.

    pad: None (valid), 'reflect' or 'zero' (width kernel//2, preserves size).
    """
    kh = w.data.shape[2]
    xd = ops.pad_spatial(x.data, kh // 2, pad) if pad else x.data
    bd = None if b is None else b.data
    out_data = ops.conv2d_forward(xd, w.data, bd)
    prev = (x, w) if b is None else (x, w, b)
    req = any(t.requires_grad for t in prev)
    out = Tensor(out_data, req, prev)
    if out.requires_grad:
        def back():
            gx, gw, gb = ops.conv2d_backward(
                out.grad, xd, w.data,
                need_gx=x.requires_grad, need_gw=w.requires_grad)
            if x.requires_grad:
                if pad:
                    gx = ops.pad_spatial_backward(gx, kh // 2, pad)
                x._accum(gx)
            if w.requires_grad:
                w._accum(gw)
            if b is not None and b.requires_grad:
                b._accum(gb)
        out._backward = back
    return out


def leaky_relu(x, slope=0.2):
    return _unary(x, ops.leaky_relu_forward(x.data, slope),
                  lambda g: ops.leaky_relu_backward(g, x.data, slope))


def relu(x):
    return _unary(x, ops.relu_forward(x.data),
                  lambda g: ops.relu_backward(g, x.data))


def sigmoid(x):
    data = ops.sigmoid_forward(x.data)
    return _unary(x, data, lambda g: ops.sigmoid_backward(g, data))


def maxpool2(x):
    data, idx = ops.maxpool2_forward(x.data)
    return _unary(x, data,
                  lambda g: ops.maxpool2_backward(g, idx, x.data.shape))


def affine_channels(x, scale, shift):
    """x * scale + shift with (1,C,1,1) constant arrays; used for input
    normalization layers whose constants never train."""
    return _unary(x, x.data * scale + shift, lambda g: g * scale)
