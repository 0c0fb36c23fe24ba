"""Candidate operations, stem and classifier.

Every candidate maps (B, C, H, W) to (B, C, ceil(H/stride), ceil(W/stride)).
Each module also reports its multiply-add count analytically through
``macs(H, W) -> (macs, H_out, W_out)`` so cost accounting never needs a
forward pass.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor
from .tensor import functional as F
from .tensor.layers import AvgPool2d, BatchNorm2d, Conv2d, Linear, MaxPool2d, Module, ReLU, Sequential

OPS = (
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "zero",
)
WEIGHT_FREE = frozenset({"max_pool_3x3", "avg_pool_3x3", "skip_connect", "zero"})


def is_weight_free(name: str) -> bool:
    if name not in OPS:
        raise KeyError(f"unknown operation {name!r}")
    return name in WEIGHT_FREE


def _out(n, k, stride, padding, dilation=1):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def macs(module, H, W):
    """Multiply-adds of ``module`` at input resolution H x W (BN/ReLU/pools count 0)."""
    if isinstance(module, Conv2d):
        k = module.weight.shape[2]
        Ho = _out(H, k, module.stride, module.padding, module.dilation)
        Wo = _out(W, k, module.stride, module.padding, module.dilation)
        c_out, c_in_g = module.weight.shape[:2]
        return c_out * c_in_g * k * k * Ho * Wo, Ho, Wo
    if isinstance(module, (MaxPool2d, AvgPool2d)):
        return 0, _out(H, module.k, module.stride, module.padding), _out(W, module.k, module.stride, module.padding)
    if isinstance(module, (BatchNorm2d, ReLU, Identity)):
        return 0, H, W
    if isinstance(module, Sequential):
        total = 0
        for layer in module.layers:
            m, H, W = macs(layer, H, W)
            total += m
        return total, H, W
    if hasattr(module, "macs"):
        return module.macs(H, W)
    raise TypeError(f"no multiply-add rule for {type(module).__name__}")


class Identity(Module):
    def forward(self, x):
        return x


class Zero(Module):
    def __init__(self, stride):
        self.stride = stride

    def forward(self, x):
        B, C, H, W = x.shape
        s = self.stride
        return Tensor(np.zeros((B, C, -(-H // s), -(-W // s)), dtype=x.dtype))

    def macs(self, H, W):
        return 0, -(-H // self.stride), -(-W // self.stride)


class FactorizedReduce(Module):
    """Two 1x1 stride-2 convs on pixel grids offset by one, concatenated."""

    def __init__(self, c_in, c_out, affine=True, *, rng):
        if c_out < 2:
            raise ValueError(f"FactorizedReduce needs at least 2 output channels, got {c_out}")
        self.relu = ReLU()
        self.conv1 = Conv2d(c_in, c_out // 2, 1, stride=2, rng=rng)
        self.conv2 = Conv2d(c_in, c_out - c_out // 2, 1, stride=2, rng=rng)
        self.bn = BatchNorm2d(c_out, affine=affine)

    def forward(self, x):
        H, W = x.shape[2:]
        if H % 2 or W % 2:
            raise ShapeError(f"factorized_reduce: spatial extents must be even, got {H}x{W}")
        x = self.relu(x)
        shifted = F.narrow(F.narrow(x, 2, 1, H), 3, 1, W)
        return self.bn(F.concat([self.conv1(x), self.conv2(shifted)], axis=1))

    def macs(self, H, W):
        m1, Ho, Wo = macs(self.conv1, H, W)
        m2, _, _ = macs(self.conv2, H - 1, W - 1)
        return m1 + m2, Ho, Wo


def relu_conv_bn(c_in, c_out, k, stride, padding, affine=True, *, rng):
    return Sequential(ReLU(), Conv2d(c_in, c_out, k, stride, padding, rng=rng), BatchNorm2d(c_out, affine=affine))


def _dw_pw_bn(c, k, stride, padding, dilation, affine, rng):
    return [
        ReLU(),
        Conv2d(c, c, k, stride, padding, dilation, groups=c, rng=rng),
        Conv2d(c, c, 1, rng=rng),
        BatchNorm2d(c, affine=affine),
    ]


class OpInstance(Module):
    """One candidate operation bound to a channel count and stride."""

    def __init__(self, name, channels, stride, body):
        self.name = name
        self.channels = channels
        self.stride = stride
        self.body = body

    @property
    def weight_free(self):
        return self.name in WEIGHT_FREE

    def forward(self, x):
        return self.body(x)

    def macs(self, H, W):
        return macs(self.body, H, W)

    def __repr__(self):
        return f"OpInstance({self.name}, C={self.channels}, stride={self.stride})"


def build_op(name: str, channels: int, stride: int, *, rng, affine: bool = False,
             pool_bn: bool = True) -> OpInstance:
    """Instantiate candidate ``name``.

    ``pool_bn`` appends a non-affine BN after the pools, as done inside the
    search mixture; evaluation cells leave it off.
    """
    if name not in OPS:
        raise KeyError(f"unknown operation {name!r}; expected one of {OPS}")
    if channels < 1:
        raise ValueError(f"channel count must be >= 1, got {channels}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    C = channels
    if name.startswith("sep_conv"):
        k = int(name[-1])
        body = Sequential(*_dw_pw_bn(C, k, stride, (k - 1) // 2, 1, affine, rng),
                          *_dw_pw_bn(C, k, 1, (k - 1) // 2, 1, affine, rng))
    elif name.startswith("dil_conv"):
        k = int(name[-1])
        body = Sequential(*_dw_pw_bn(C, k, stride, k - 1, 2, affine, rng))
    elif name == "max_pool_3x3":
        layers = [MaxPool2d(3, stride, 1)]
        body = Sequential(*layers, BatchNorm2d(C, affine=False)) if pool_bn else Sequential(*layers)
    elif name == "avg_pool_3x3":
        layers = [AvgPool2d(3, stride, 1, count_include_pad=False)]
        body = Sequential(*layers, BatchNorm2d(C, affine=False)) if pool_bn else Sequential(*layers)
    elif name == "skip_connect":
        body = Identity() if stride == 1 else FactorizedReduce(C, C, affine, rng=rng)
    else:
        body = Zero(stride)
    return OpInstance(name, C, stride, body)


class Classifier(Module):
    def __init__(self, channels, classes, *, rng):
        self.linear = Linear(channels, classes, rng=rng)

    def forward(self, x):
        return self.linear(F.global_avg_pool(x))

    def macs(self, H, W):
        n_in, n_out = self.linear.weight.shape
        return n_in * n_out, 1, 1


def build_stem(in_channels: int, out_channels: int, *, rng, affine: bool = True) -> Sequential:
    """3x3 conv + BN at input resolution."""
    if in_channels < 1 or out_channels < 1:
        raise ValueError("stem extents must be positive")
    return Sequential(Conv2d(in_channels, out_channels, 3, 1, 1, rng=rng), BatchNorm2d(out_channels, affine=affine))


def build_classifier(channels: int, classes: int, *, rng) -> Classifier:
    if channels < 1 or classes < 1:
        raise ValueError("classifier extents must be positive")
    return Classifier(channels, classes, rng=rng)


def param_count(module) -> int:
    return int(sum(p.size for p in module.parameters()))
