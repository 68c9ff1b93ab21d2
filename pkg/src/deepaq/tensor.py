"""Dense float tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward closure on the output tensor, so
the graph is implicit in the result of the forward pass. ``backward`` orders
the graph topologically and visits each node once.

Data is float32 unless a float64 array is passed in; ops keep the dtype of
their inputs, which is how the 64-bit gradient checks run.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericFault, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _float_dtype(data, dtype):
    if dtype is not None:
        return np.dtype(dtype)
    if isinstance(data, (np.ndarray, np.generic)) and data.dtype == np.float64:
        return np.dtype(np.float64)
    return np.dtype(np.float32)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_retain")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=_float_dtype(data, dtype))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._retain = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, op={self.op})"

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def is_leaf(self):
        return not self._parents

    def retain_grad(self):
        """Keep the gradient of a non-leaf node after ``backward``."""
        self._retain = True
        return self

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    return a, _lift(b, a)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericFault(f"non-finite value produced by {op}")


def _result(data, parents, backward_fn, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._retain = False
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = req
    out._parents = tuple(parents) if req else ()
    out._backward = backward_fn if req else None
    return out


def topological_order(root):
    """Nodes reachable from ``root`` that require grad, parents before children."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = list(loss.shape) if isinstance(loss, Tensor) else type(loss).__name__
        raise ShapeError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents or node._retain:
            node.grad = np.array(g, dtype=node.dtype) if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = grads[k] + pg if k in grads else pg


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} do not broadcast") from None


# --- elementwise -----------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_check(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), bw, "add")


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_check(a, b, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), bw, "mul")


def neg(x):
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def relu(x):
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, x.dtype.type(0)), (x,), bw, "relu")


def sigmoid(x):
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def grad_reverse(x, lam):
    """Identity forward; scales the gradient by ``-lam`` on the way back."""
    lam = float(lam)
    if not math.isfinite(lam) or lam < 0:
        raise ConfigError(f"gradient reversal coefficient must be finite and >= 0, got {lam}")
    factor = x.dtype.type(-lam)
    return _result(x.data, (x,), lambda g: (g * factor,), "grad_reverse")


# --- reductions and shape ops ----------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {list(x.shape)}")
    out = x.data.mean(axis=axes, keepdims=keepdims)
    scale = x.dtype.type(1.0 / count)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, x.shape),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {list(x.shape)} into {list(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x, idx):
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, dtype=x.dtype), (x,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {list(ref)} and {list(t.shape)} differ")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


# --- linear algebra and convolution ----------------------------------------


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} are not aligned")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def _pad(x, padding, value=0.0):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _windows(xp, kh, kw, stride):
    """View of shape [B, C, Ho, Wo, kh, kw]."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _col2im(dwin, padded_shape, stride):
    """Scatter-add window gradients [B, C, Ho, Wo, kh, kw] back onto the padded input."""
    _, _, ho, wo, kh, kw = dwin.shape
    dxp = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dwin[..., i, j]
    return dxp


def _crop(dxp, padding):
    if padding == 0:
        return dxp
    return dxp[:, :, padding:-padding, padding:-padding]


def _out_size(n, k, stride, padding, op):
    size = (n + 2 * padding - k) // stride + 1
    if size < 1:
        raise ShapeError(f"{op}: kernel {k} with padding {padding} does not fit spatial size {n}")
    return size


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation. x: [B, C, H, W], weight: [O, C, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {list(x.shape)} and weight {list(weight.shape)} are incompatible")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {list(bias.shape)} does not match weight {list(weight.shape)}")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    ho = _out_size(H, kh, stride, padding, "conv2d")
    wo = _out_size(W, kw, stride, padding, "conv2d")
    xp = _pad(x.data, padding)
    # columns laid out [C*kh*kw, B*Ho*Wo] so the copy runs along contiguous rows
    cols = _windows(xp, kh, kw, stride).transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, B * ho * wo)
    wmat = weight.data.reshape(O, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(O, B, ho, wo).transpose(1, 0, 2, 3)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gt = g.transpose(1, 0, 2, 3).reshape(O, -1)
        dx = dw = db = None
        if weight.requires_grad:
            dw = (gt @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = gt.sum(axis=1)
        if x.requires_grad:
            dcols = (wmat.T @ gt).reshape(C, kh, kw, B, ho, wo)
            dxp = np.zeros((C, B) + xp.shape[2:], dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, i, j]
            dx = np.ascontiguousarray(_crop(dxp, padding).transpose(1, 0, 2, 3))
        return (dx, dw) if bias is None else (dx, dw, db)

    return _result(np.ascontiguousarray(out), parents, bw, "conv2d")


def maxpool2d(x, kernel, stride=None, padding=0):
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [B, C, H, W], got {list(x.shape)}")
    B, C, H, W = x.shape
    ho = _out_size(H, kernel, stride, padding, "maxpool2d")
    wo = _out_size(W, kernel, stride, padding, "maxpool2d")
    xp = _pad(x.data, padding, value=-np.inf)
    win = _windows(xp, kernel, kernel, stride).reshape(B, C, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dwin = np.zeros((B, C, ho, wo, kernel * kernel), dtype=x.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dwin = dwin.reshape(B, C, ho, wo, kernel, kernel)
        return (_crop(_col2im(dwin, xp.shape, stride), padding),)

    return _result(out, (x,), bw, "maxpool2d")


def avgpool2d(x, kernel, stride=None, padding=0):
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d expects [B, C, H, W], got {list(x.shape)}")
    B, C, H, W = x.shape
    ho = _out_size(H, kernel, stride, padding, "avgpool2d")
    wo = _out_size(W, kernel, stride, padding, "avgpool2d")
    xp = _pad(x.data, padding)
    scale = x.dtype.type(1.0 / (kernel * kernel))
    out = _windows(xp, kernel, kernel, stride).sum(axis=(-2, -1)) * scale

    def bw(g):
        dwin = np.broadcast_to((g * scale)[..., None, None], (B, C, ho, wo, kernel, kernel))
        return (_crop(_col2im(dwin, xp.shape, stride), padding),)

    return _result(out.astype(x.dtype), (x,), bw, "avgpool2d")


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over (B, H, W).

    ``running_mean``/``running_var`` are numpy buffers updated in place when
    ``training`` is true (unbiased variance, as in the usual convention).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {list(x.shape)} vs affine {list(gamma.shape)}")
    axes = (0, 2, 3)
    n = x.data.size // x.shape[1]
    dt = x.dtype.type
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        if n > 1:
            running_var *= 1 - momentum
            running_var += (momentum * n / (n - 1)) * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=axes)[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                dx = (inv[None, :, None, None] / dt(n)) * (dt(n) * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv[None, :, None, None]
        return (dx, dgamma, dbeta)

    return _result(out, (x, gamma, beta), bw, "batchnorm2d")


def dropout(x, p, training, rng):
    """Inverted dropout; identity outside training or for ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float64) >= p).astype(x.dtype)
    mask = keep * x.dtype.type(1.0 / (1.0 - p))
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy, computed as max(z,0) - z*y + log1p(exp(-|z|))."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"bce: logits {list(z.shape)} and labels {list(y.shape)} differ")
    if z.size == 0:
        raise ShapeError("bce over an empty batch")
    e = np.exp(-np.abs(z))
    per = np.maximum(z, 0) - z * y + np.log1p(e)
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    scale = z.dtype.type(1.0 / z.size)
    return _result(np.asarray(per.mean(), dtype=z.dtype), (logits,), lambda g: ((s - y) * (g * scale),), "bce")
