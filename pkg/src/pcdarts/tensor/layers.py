"""Small module system on top of the primitives."""
from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .core import Tensor, default_dtype


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, (Module, Tensor)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            else:
                yield from val.named_parameters(name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key, val in vars(self).items():
            if key.startswith("running_") and isinstance(val, np.ndarray):
                yield f"{prefix}{key}", val
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]


def _param(arr, name=None):
    return Tensor(np.asarray(arr, dtype=default_dtype()), requires_grad=True, name=name)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, stride=1, padding=0, dilation=1, groups=1, *, rng):
        if c_in < 1 or c_out < 1:
            raise ValueError(f"Conv2d: channel counts must be positive, got {c_in}->{c_out}")
        fan_in = (c_in // groups) * k * k
        std = math.sqrt(2.0 / fan_in)
        self.weight = _param(rng.normal(0.0, std, size=(c_out, c_in // groups, k, k)))
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def forward(self, x):
        return F.conv2d(x, self.weight, self.stride, self.padding, self.dilation, self.groups)


class BatchNorm2d(Module):
    def __init__(self, c, affine=True, momentum=0.1, eps=1e-5):
        dt = default_dtype()
        self.running_mean = np.zeros(c, dtype=dt)
        self.running_var = np.ones(c, dtype=dt)
        self.weight = _param(np.ones(c)) if affine else None
        self.bias = _param(np.zeros(c)) if affine else None
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                            training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, n_in, n_out, *, rng):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = _param(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = _param(rng.uniform(-bound, bound, size=(n_out,)))

    def forward(self, x):
        return F.add(F.matmul(x, self.weight), self.bias)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class MaxPool2d(Module):
    def __init__(self, k, stride, padding=0):
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, x):
        return F.max_pool2d(x, self.k, self.stride, self.padding)


class AvgPool2d(Module):
    def __init__(self, k, stride, padding=0, count_include_pad=False):
        self.k, self.stride, self.padding = k, stride, padding
        self.count_include_pad = count_include_pad

    def forward(self, x):
        return F.avg_pool2d(x, self.k, self.stride, self.padding, self.count_include_pad)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
