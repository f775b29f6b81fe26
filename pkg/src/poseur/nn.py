"""Small parameter containers built on :mod:`poseur.tensor`."""
from __future__ import annotations

import numpy as np

from .errors import FormatError
from .tensor import Tensor, conv2d


class Module:
    """Attribute-walking container for parameters, buffers and submodules."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and not value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_buffers(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        state = {k: v.data.copy() for k, v in self.named_parameters()}
        state.update({k: v.data.copy() for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        own.update(self.named_buffers())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise FormatError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for k, t in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise FormatError(f"shape mismatch for {k}: checkpoint {arr.shape}, model {t.shape}")
            t.data = arr.copy()
        return self


def param(array, name=None):
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True, name=name)


def xavier(rng, fan_in, fan_out, shape=None, gain=1.0):
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, zero=False):
        w = np.zeros((n_in, n_out)) if zero else xavier(rng, n_in, n_out)
        self.weight = param(w)
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = param(np.ones(dim))
        self.shift = param(np.zeros(dim))
        self._eps = eps

    def __call__(self, x):
        centered = x - x.mean(axis=-1, keepdims=True)
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered * (var + self._eps) ** -0.5 * self.gain + self.shift


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0):
        fan_in = c_in * kernel * kernel
        self.weight = param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel)))
        self.bias = param(np.zeros(c_out))
        self._stride = stride
        self._padding = padding

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class BatchNorm2d(Module):
    """Batch normalization over ``[B, C, H, W]`` with running statistics for eval mode."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gain = param(np.ones(channels))
        self.shift = param(np.zeros(channels))
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self._momentum = momentum
        self._eps = eps

    def __call__(self, x):
        g = self.gain.reshape(1, -1, 1, 1)
        b = self.shift.reshape(1, -1, 1, 1)
        if not self.training:
            mean = self.running_mean.data.reshape(1, -1, 1, 1)
            inv = (self.running_var.data.reshape(1, -1, 1, 1) + self._eps) ** -0.5
            return (x - mean) * inv * g + b
        centered = x - x.mean(axis=(0, 2, 3), keepdims=True)
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        m = self._momentum
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var.data.reshape(-1) * n / max(n - 1, 1)
        self.running_mean.data = (1 - m) * self.running_mean.data + m * (x.data.mean(axis=(0, 2, 3)))
        self.running_var.data = (1 - m) * self.running_var.data + m * unbiased
        return centered * (var + self._eps) ** -0.5 * g + b
