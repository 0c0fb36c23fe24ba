"""Pure numpy versions of the sliding-window kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same accumulation order over window offsets.  Inputs are already
padded; callers crop gradients back to the unpadded extent.
"""
import numpy as np


def _window(a, i, j, stride, dilation, Ho, Wo):
    return a[:, :, i * dilation:i * dilation + stride * (Ho - 1) + 1:stride,
             j * dilation:j * dilation + stride * (Wo - 1) + 1:stride]


def dw_conv_forward(xp, w, stride, dilation, Ho, Wo):
    B, C = xp.shape[:2]
    kh, kw = w.shape[1:]
    out = np.zeros((B, C, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += w[None, :, i, j, None, None] * _window(xp, i, j, stride, dilation, Ho, Wo)
    return out


def dw_conv_backward(xp, w, gout, stride, dilation):
    Ho, Wo = gout.shape[2:]
    kh, kw = w.shape[1:]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            gw[:, i, j] = (gout * _window(xp, i, j, stride, dilation, Ho, Wo)).sum(axis=(0, 2, 3))
            _window(gxp, i, j, stride, dilation, Ho, Wo)[...] += w[None, :, i, j, None, None] * gout
    return gxp, gw


def col2im(gcols, xp_shape, stride, dilation):
    """Scatter-add (B, C, kh, kw, Ho, Wo) columns back onto a padded image."""
    kh, kw, Ho, Wo = gcols.shape[2:]
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            _window(gxp, i, j, stride, dilation, Ho, Wo)[...] += gcols[:, :, i, j]
    return gxp


def window_max_forward(xp, k, stride, Ho, Wo):
    out = None
    arg = np.zeros((xp.shape[0], xp.shape[1], Ho, Wo), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            v = _window(xp, i, j, stride, 1, Ho, Wo)
            if out is None:
                out = v.copy()
                continue
            better = v > out
            out[better] = v[better]
            arg[better] = i * k + j
    return out, arg


def window_max_backward(gout, arg, xp_shape, k, stride):
    Ho, Wo = gout.shape[2:]
    gxp = np.zeros(xp_shape, dtype=gout.dtype)
    for i in range(k):
        for j in range(k):
            _window(gxp, i, j, stride, 1, Ho, Wo)[...] += np.where(arg == i * k + j, gout, 0)
    return gxp


def window_sum_forward(xp, k, stride, Ho, Wo):
    out = np.zeros((xp.shape[0], xp.shape[1], Ho, Wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += _window(xp, i, j, stride, 1, Ho, Wo)
    return out


def window_sum_backward(gout, xp_shape, k, stride):
    Ho, Wo = gout.shape[2:]
    gxp = np.zeros(xp_shape, dtype=gout.dtype)
    for i in range(k):
        for j in range(k):
            _window(gxp, i, j, stride, 1, Ho, Wo)[...] += gout
    return gxp
