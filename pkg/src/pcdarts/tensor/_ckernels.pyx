# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sliding-window kernels (see _fallback.py for the reference twins)."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef int _check(Py_ssize_t n_in, Py_ssize_t n_out, Py_ssize_t k, Py_ssize_t stride,
                Py_ssize_t dilation) except -1:
    if n_out < 1 or (n_out - 1) * stride + (k - 1) * dilation >= n_in:
        raise ValueError(f"window does not fit: in={n_in} out={n_out} k={k} "
                         f"stride={stride} dilation={dilation}")
    return 0


def dw_conv_forward(floating[:, :, :, ::1] xp, floating[:, :, ::1] w,
                    Py_ssize_t stride, Py_ssize_t dilation, Py_ssize_t Ho, Py_ssize_t Wo):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t b, c, y, x, i, j
    cdef floating acc
    _check(xp.shape[2], Ho, kh, stride, dilation)
    _check(xp.shape[3], Wo, kw, stride, dilation)
    if w.shape[0] != C:
        raise ValueError("weight/channel mismatch")
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((B, C, Ho, Wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(Ho):
                    for x in range(Wo):
                        acc = 0
                        for i in range(kh):
                            for j in range(kw):
                                acc = acc + w[c, i, j] * xp[b, c, y * stride + i * dilation,
                                                            x * stride + j * dilation]
                        out[b, c, y, x] = acc
    return out_arr


def dw_conv_backward(floating[:, :, :, ::1] xp, floating[:, :, ::1] w,
                     floating[:, :, :, ::1] gout, Py_ssize_t stride, Py_ssize_t dilation):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t Ho = gout.shape[2], Wo = gout.shape[3]
    cdef Py_ssize_t b, c, y, x, i, j, yy, xx
    cdef floating g
    _check(xp.shape[2], Ho, kh, stride, dilation)
    _check(xp.shape[3], Wo, kw, stride, dilation)
    if w.shape[0] != C or gout.shape[0] != B or gout.shape[1] != C:
        raise ValueError("gradient/weight/channel mismatch")
    dtype = np.float64 if floating is double else np.float32
    gxp_arr = np.zeros((xp.shape[0], xp.shape[1], xp.shape[2], xp.shape[3]), dtype=dtype)
    gw_arr = np.zeros((w.shape[0], kh, kw), dtype=dtype)
    cdef floating[:, :, :, ::1] gxp = gxp_arr
    cdef floating[:, :, ::1] gw = gw_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(Ho):
                    for x in range(Wo):
                        g = gout[b, c, y, x]
                        for i in range(kh):
                            yy = y * stride + i * dilation
                            for j in range(kw):
                                xx = x * stride + j * dilation
                                gw[c, i, j] += g * xp[b, c, yy, xx]
                                gxp[b, c, yy, xx] += g * w[c, i, j]
    return gxp_arr, gw_arr


def col2im(floating[:, :, :, :, :, ::1] gcols, tuple xp_shape,
           Py_ssize_t stride, Py_ssize_t dilation):
    cdef Py_ssize_t B = gcols.shape[0], C = gcols.shape[1]
    cdef Py_ssize_t kh = gcols.shape[2], kw = gcols.shape[3]
    cdef Py_ssize_t Ho = gcols.shape[4], Wo = gcols.shape[5]
    cdef Py_ssize_t b, c, y, x, i, j
    if len(xp_shape) != 4 or xp_shape[0] != B or xp_shape[1] != C:
        raise ValueError("column/image shape mismatch")
    _check(xp_shape[2], Ho, kh, stride, dilation)
    _check(xp_shape[3], Wo, kw, stride, dilation)
    dtype = np.float64 if floating is double else np.float32
    gxp_arr = np.zeros(xp_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] gxp = gxp_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(Ho):
                            for x in range(Wo):
                                gxp[b, c, y * stride + i * dilation, x * stride + j * dilation] += \
                                    gcols[b, c, i, j, y, x]
    return gxp_arr


def window_max_forward(floating[:, :, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride,
                       Py_ssize_t Ho, Py_ssize_t Wo):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t b, c, y, x, i, j, best_at
    cdef floating best, v
    _check(xp.shape[2], Ho, k, stride, 1)
    _check(xp.shape[3], Wo, k, stride, 1)
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((B, C, Ho, Wo), dtype=dtype)
    arg_arr = np.empty((B, C, Ho, Wo), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(Ho):
                    for x in range(Wo):
                        best = xp[b, c, y * stride, x * stride]
                        best_at = 0
                        for i in range(k):
                            for j in range(k):
                                v = xp[b, c, y * stride + i, x * stride + j]
                                if v > best:
                                    best = v
                                    best_at = i * k + j
                        out[b, c, y, x] = best
                        arg[b, c, y, x] = best_at
    return out_arr, arg_arr


def window_max_backward(floating[:, :, :, ::1] gout, cnp.int64_t[:, :, :, ::1] arg,
                        tuple xp_shape, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t B = gout.shape[0], C = gout.shape[1]
    cdef Py_ssize_t Ho = gout.shape[2], Wo = gout.shape[3]
    cdef Py_ssize_t b, c, y, x, a
    if len(xp_shape) != 4 or xp_shape[0] != B or xp_shape[1] != C:
        raise ValueError("gradient/image shape mismatch")
    if arg.shape[0] != B or arg.shape[1] != C or arg.shape[2] != Ho or arg.shape[3] != Wo:
        raise ValueError("argmax/gradient shape mismatch")
    _check(xp_shape[2], Ho, k, stride, 1)
    _check(xp_shape[3], Wo, k, stride, 1)
    dtype = np.float64 if floating is double else np.float32
    gxp_arr = np.zeros(xp_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] gxp = gxp_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(Ho):
                    for x in range(Wo):
                        a = arg[b, c, y, x]
                        gxp[b, c, y * stride + a // k, x * stride + a % k] += gout[b, c, y, x]
    return gxp_arr


def window_sum_forward(floating[:, :, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride,
                       Py_ssize_t Ho, Py_ssize_t Wo):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t b, c, y, x, i, j
    cdef floating acc
    _check(xp.shape[2], Ho, k, stride, 1)
    _check(xp.shape[3], Wo, k, stride, 1)
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((B, C, Ho, Wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(Ho):
                    for x in range(Wo):
                        acc = 0
                        for i in range(k):
                            for j in range(k):
                                acc = acc + xp[b, c, y * stride + i, x * stride + j]
                        out[b, c, y, x] = acc
    return out_arr


def window_sum_backward(floating[:, :, :, ::1] gout, tuple xp_shape,
                        Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t B = gout.shape[0], C = gout.shape[1]
    cdef Py_ssize_t Ho = gout.shape[2], Wo = gout.shape[3]
    cdef Py_ssize_t b, c, y, x, i, j
    cdef floating g
    if len(xp_shape) != 4 or xp_shape[0] != B or xp_shape[1] != C:
        raise ValueError("gradient/image shape mismatch")
    _check(xp_shape[2], Ho, k, stride, 1)
    _check(xp_shape[3], Wo, k, stride, 1)
    dtype = np.float64 if floating is double else np.float32
    gxp_arr = np.zeros(xp_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] gxp = gxp_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(Ho):
                    for x in range(Wo):
                        g = gout[b, c, y, x]
                        for i in range(k):
                            for j in range(k):
                                gxp[b, c, y * stride + i, x * stride + j] += g
    return gxp_arr
