"""Layers, losses and the Adam optimizer built on :mod:`deepaq.tensor`."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Parameter container. Attributes holding Parameters, Modules or lists of
    Modules are discovered in assignment order; numpy buffers are registered
    through ``register_buffer``."""

    def __init__(self):
        self.training = True
        self._buffer_names = []

    def register_buffer(self, name, value):
        setattr(self, name, value)
        self._buffer_names.append(name)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffer_names:
            yield (f"{prefix}.{name}" if prefix else name), getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise DataError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in self.named_parameters():
            _assign(name, p.data, state[name])
        for name, buf in self.named_buffers():
            _assign(name, buf, state[name])

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters and buffers in place (used for 64-bit checks)."""
        for _, m in self.named_modules():
            for name, value in vars(m).items():
                if isinstance(value, Parameter):
                    value.data = value.data.astype(dtype)
                    value.grad = None
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _assign(name, dst, src):
    src = np.asarray(src)
    if src.shape != dst.shape:
        raise ShapeError(f"{name}: stored shape {list(src.shape)} does not match model shape {list(dst.shape)}")
    dst[...] = src


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=False):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel))
        self.bias = Parameter(np.zeros(out_ch, np.float32)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, zero_init=False):
        super().__init__()
        if zero_init:
            w = np.zeros((in_features, out_features), np.float32)
        else:
            w = he_normal(rng, (in_features, out_features), in_features)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, np.float32))

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"linear: input {list(x.shape)} vs weight {list(self.weight.shape)}")
        return T.matmul(x, self.weight) + self.bias


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, np.float32))
        self.bias = Parameter(np.zeros(channels, np.float32))
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))

    def forward(self, x):
        return T.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class Dropout(Module):
    def __init__(self, p):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(0)

    def forward(self, x):
        return T.dropout(x, self.p, self.training, self.rng)


# --- losses ----------------------------------------------------------------


def euclidean_loss(pred, target):
    """Mean squared error over the batch."""
    target_arr = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target_arr.shape:
        raise ShapeError(f"euclidean_loss: prediction {list(pred.shape)} vs target {list(target_arr.shape)}")
    if pred.data.size == 0:
        raise DataError("euclidean_loss over an empty batch")
    diff = pred - Tensor(target_arr)
    return T.mean(diff * diff)


def domain_bce(logits, labels):
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise DataError("domain labels must be 0 (source) or 1 (target)")
    return T.bce_with_logits(logits, labels)


# --- optimizer -------------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay restricted to ``decay`` parameter names."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, decay=()):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = set(decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        missing = [name for name, p in self.params if p.grad is None]
        if missing:
            raise DataError(f"no gradient for trainable parameters: {missing[:5]}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            dt = p.dtype.type
            g = p.grad
            if self.weight_decay and name in self.decay:
                p.data -= dt(self.lr * self.weight_decay) * p.data
            m, v = self.m[name], self.v[name]
            m *= dt(self.beta1)
            m += dt(1.0 - self.beta1) * g
            v *= dt(self.beta2)
            v += dt(1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / dt(bc2)) + dt(self.eps)
            p.data -= dt(self.lr) * (m / dt(bc1)) / denom
