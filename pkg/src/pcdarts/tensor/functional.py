"""Differentiable primitives.

Each primitive computes its output with numpy (or the window kernels), checks
it is finite, and appends a tape record when any input requires grad.  The
record's backward maps the output gradient to one gradient per input (None
where the input does not need one).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import kernels
from .core import NumericalError, ShapeError, Tensor, tape


def _emit(kind, out_data, inputs, backward):
    t = tape()
    if not np.isfinite(out_data).all():
        raise NumericalError(kind, t.next_id)
    need = t.enabled and any(i.requires_grad for i in inputs)
    out = Tensor(out_data, requires_grad=need)
    if need:
        out.is_leaf = False
        t.append(kind, inputs, out, backward)
    else:
        t.next_id += 1
    return out


def _as_tensor(x, like: Tensor):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise

def add(a, b):
    b = _as_tensor(b, a)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    b = _as_tensor(b, a)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    b = _as_tensor(b, a)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float):
    c = a.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x):
    xd = x.data
    mask = xd > 0
    return _emit("relu", np.where(mask, xd, 0).astype(xd.dtype, copy=False), (x,),
                 lambda g: (g * mask,))


def square(x):
    xd = x.data
    return _emit("square", xd * xd, (x,), lambda g: (2 * g * xd,))


def sum_all(x):
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x):
    n = x.size
    shape = x.shape
    return _emit("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def reshape(x, shape):
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible extents {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def mix(weights, tensors):
    """Sum_k weights[k] * tensors[k] for a 1-D weight tensor."""
    w = weights.data
    if w.ndim != 1 or w.shape[0] != len(tensors):
        raise ShapeError(f"mix: {len(tensors)} tensors but weight shape {weights.shape}")
    shape = tensors[0].shape
    for k, t in enumerate(tensors):
        if t.shape != shape:
            raise ShapeError(f"mix: operand {k} has shape {t.shape}, expected {shape}")
    out = w[0] * tensors[0].data
    for k in range(1, len(tensors)):
        out = out + w[k] * tensors[k].data
    datas = [t.data for t in tensors]
    needs = [t.requires_grad for t in tensors]

    def backward(g):
        gw = np.array([(g * d).sum() for d in datas], dtype=w.dtype) if weights.requires_grad else None
        return (gw, *[w[k] * g if needs[k] else None for k in range(len(datas))])

    return _emit("mix", out, (weights, *tensors), backward)


# ----------------------------------------------------------------------------
# shape manipulation

def concat(tensors, axis: int = 1):
    if not tensors:
        raise ShapeError("concat: no operands")
    ref = tensors[0].shape
    for k, t in enumerate(tensors):
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: operand {k} has shape {t.shape}, incompatible with {ref} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for k in range(len(sizes)):
            idx[axis] = slice(bounds[k], bounds[k + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def narrow(x, axis: int, start: int, stop: int):
    """Contiguous slice [start, stop) along ``axis``."""
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"narrow: range [{start}, {stop}) invalid for extent {n} on axis {axis}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[idx] = g
        return (out,)

    return _emit("narrow", x.data[idx], (x,), backward)


def take(x, axis: int, index):
    """Gather entries ``index`` along ``axis`` (index must not repeat)."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[axis]
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= n)):
        raise ShapeError(f"take: index out of range for extent {n} on axis {axis}")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        idx = [slice(None)] * g.ndim
        idx[axis] = index
        np.add.at(out, tuple(idx), g)
        return (out,)

    return _emit("take", np.take(x.data, index, axis=axis), (x,), backward)


def select(x, i: int):
    """Row ``i`` of the leading axis."""
    if not 0 <= i < x.shape[0]:
        raise ShapeError(f"select: row {i} out of range for leading extent {x.shape[0]}")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[i] = g
        return (out,)

    return _emit("select", x.data[i], (x,), backward)


# ----------------------------------------------------------------------------
# reductions / losses

def softmax(x, axis: int = -1):
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", y, (x,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def global_avg_pool(x):
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    return _emit("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), (B, C, H, W)).copy(),))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy over the batch; ``labels`` are class ids."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ShapeError(f"cross_entropy: label out of range for {z.shape[1]} classes")
    B = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = np.asarray((lse - shifted[rows, labels]).mean(), dtype=z.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1
        return (p * (g / B),)

    return _emit("cross_entropy", loss, (logits,), backward)


# ----------------------------------------------------------------------------
# convolution / pooling

def _out_extent(n, k, stride, padding, dilation=1):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _pad(a, padding, value=0.0):
    if padding == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _crop(a, padding):
    if padding == 0:
        return a
    return a[:, :, padding:-padding, padding:-padding]


def conv2d(x, w, stride: int = 1, padding: int = 0, dilation: int = 1, groups: int = 1):
    """Cross-correlation without bias.  ``w`` has shape (Cout, Cin/groups, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or dilation < 1 or groups < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} dilation={dilation} groups={groups} padding={padding}")
    if x.dtype != w.dtype:
        raise ShapeError(f"conv2d: input dtype {x.dtype} differs from weight dtype {w.dtype}")
    B, Cin, H, W = x.shape
    Cout, cin_g, kh, kw = w.shape
    if Cin % groups or Cout % groups or cin_g != Cin // groups:
        raise ShapeError(f"conv2d: groups={groups} incompatible with input channels {Cin} "
                         f"and weight {w.shape}")
    Ho = _out_extent(H, kh, stride, padding, dilation)
    Wo = _out_extent(W, kw, stride, padding, dilation)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {H}x{W} too small for kernel {kh}x{kw} "
                         f"(dilation {dilation}, padding {padding})")
    xp = _pad(x.data, padding)
    wd = w.data

    if groups == Cin and Cout == Cin:
        out = kernels.dw_conv_forward(xp, wd[:, 0], stride, dilation, Ho, Wo)

        def backward(g):
            gxp, gw = kernels.dw_conv_backward(xp, wd[:, 0], g, stride, dilation)
            return _crop(gxp, padding), gw[:, None]

        return _emit("conv2d", out, (x, w), backward)

    xc = np.ascontiguousarray(xp)
    s = xc.strides
    cols = as_strided(xc, (B, Cin, kh, kw, Ho, Wo),
                      (s[0], s[1], s[2] * dilation, s[3] * dilation, s[2] * stride, s[3] * stride),
                      writeable=False)
    co_g = Cout // groups
    parts = []
    for gi in range(groups):
        cg = cols[:, gi * cin_g:(gi + 1) * cin_g]
        wg = wd[gi * co_g:(gi + 1) * co_g]
        parts.append(np.tensordot(cg, wg, axes=([1, 2, 3], [1, 2, 3])))
    out = np.ascontiguousarray(np.concatenate(parts, axis=3).transpose(0, 3, 1, 2))

    def backward(g):
        gws, gcols = [], []
        for gi in range(groups):
            gg = g[:, gi * co_g:(gi + 1) * co_g]
            cg = cols[:, gi * cin_g:(gi + 1) * cin_g]
            gws.append(np.tensordot(gg, cg, axes=([0, 2, 3], [0, 4, 5])))
            gc = np.tensordot(gg, wd[gi * co_g:(gi + 1) * co_g], axes=([1], [0]))
            gcols.append(gc.transpose(0, 3, 4, 5, 1, 2))
        gc = np.ascontiguousarray(np.concatenate(gcols, axis=1))
        gxp = kernels.col2im(gc, xc.shape, stride, dilation)
        return _crop(gxp, padding), np.concatenate(gws, axis=0)

    return _emit("conv2d", out, (x, w), backward)


def _pool_check(kind, x, k, stride, padding):
    if x.data.ndim != 4:
        raise ShapeError(f"{kind}: expected (B,C,H,W), got {x.shape}")
    if k < 1 or stride < 1 or padding < 0 or 2 * padding > k:
        raise ShapeError(f"{kind}: invalid window={k} stride={stride} padding={padding}")
    Ho = _out_extent(x.shape[2], k, stride, padding)
    Wo = _out_extent(x.shape[3], k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"{kind}: input {x.shape[2]}x{x.shape[3]} too small for window {k}")
    return Ho, Wo


def max_pool2d(x, k: int, stride: int, padding: int = 0):
    Ho, Wo = _pool_check("max_pool2d", x, k, stride, padding)
    xp = _pad(x.data, padding, value=-np.inf)
    out, arg = kernels.window_max_forward(xp, k, stride, Ho, Wo)

    def backward(g):
        return (_crop(kernels.window_max_backward(g, arg, xp.shape, k, stride), padding),)

    return _emit("max_pool2d", out, (x,), backward)


_COUNT_CACHE: dict = {}


def _window_counts(H, W, k, stride, padding, dtype):
    key = (H, W, k, stride, padding, np.dtype(dtype).str)
    c = _COUNT_CACHE.get(key)
    if c is None:
        from . import _fallback
        ones = _pad(np.ones((1, 1, H, W), dtype=dtype), padding)
        Ho = _out_extent(H, k, stride, padding)
        Wo = _out_extent(W, k, stride, padding)
        c = _COUNT_CACHE[key] = _fallback.window_sum_forward(ones, k, stride, Ho, Wo)
    return c


def avg_pool2d(x, k: int, stride: int, padding: int = 0, count_include_pad: bool = False):
    Ho, Wo = _pool_check("avg_pool2d", x, k, stride, padding)
    xp = _pad(x.data, padding)
    if count_include_pad:
        counts = x.dtype.type(k * k)
    else:
        counts = _window_counts(x.shape[2], x.shape[3], k, stride, padding, x.dtype)
    out = kernels.window_sum_forward(xp, k, stride, Ho, Wo) / counts

    def backward(g):
        return (_crop(kernels.window_sum_backward(g / counts, xp.shape, k, stride), padding),)

    return _emit("avg_pool2d", out, (x,), backward)


def batch_norm(x, running_mean, running_var, weight=None, bias=None,
               training: bool = True, momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel batch norm over (B, H, W).

    In training mode the batch statistics normalize the input and the running
    buffers (plain ndarrays) are updated in place; in eval mode the running
    buffers are used and the map is affine per channel.
    """
    xd = x.data
    if xd.ndim != 4 or running_mean.shape != (xd.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} vs {running_mean.shape[0]} channels")
    C = xd.shape[1]
    dt = xd.dtype.type
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(xd.dtype)
    xhat = (xd - mean.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)
    gamma = weight.data.reshape(1, C, 1, 1) if weight is not None else None
    out = xhat * gamma if gamma is not None else xhat
    if bias is not None:
        out = out + bias.data.reshape(1, C, 1, 1)
    inputs = (x,) + tuple(t for t in (weight, bias) if t is not None)

    def backward(g):
        dxhat = g * gamma if gamma is not None else g
        if training:
            m = xd.shape[0] * xd.shape[2] * xd.shape[3]
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv_std.reshape(1, C, 1, 1) / m * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std.reshape(1, C, 1, 1)
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _emit("batch_norm", out.astype(xd.dtype, copy=False), inputs, backward)
