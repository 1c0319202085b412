# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sliding-window kernels.

Loop order mirrors ``_kernels_py`` so both backends produce bit-identical
results: accumulations into any output cell visit kernel offsets (ki, kj) in
row-major order.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t oh, Py_ssize_t ow):
    """Columns of shape (C*k*k, N*oh*ow); each row is one (channel, ki, kj) tap."""
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t b, ch, i, j, ki, kj
    cdef Py_ssize_t npix = n * oh * ow
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((c * k * k, npix), dtype=dtype)
    cdef floating[:, ::1] o = out
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for ch in range(c):
            for ki in range(k):
                for kj in range(k):
                    dst = &o[(ch * k + ki) * k + kj, 0]
                    for b in range(n):
                        for i in range(oh):
                            src = &xp[b, ch, i * stride + ki, kj]
                            if stride == 1:
                                for j in range(ow):
                                    dst[j] = src[j]
                            else:
                                for j in range(ow):
                                    dst[j] = src[j * stride]
                            dst += ow
    return out


def col2im(floating[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t hp,
           Py_ssize_t wp, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t oh,
           Py_ssize_t ow):
    cdef Py_ssize_t b, ch, i, j, ki, kj
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for ki in range(k):
            for kj in range(k):
                for ch in range(c):
                    src = &cols[(ch * k + ki) * k + kj, 0]
                    for b in range(n):
                        for i in range(oh):
                            dst = &o[b, ch, i * stride + ki, kj]
                            if stride == 1:
                                for j in range(ow):
                                    dst[j] += src[j]
                            else:
                                for j in range(ow):
                                    dst[j * stride] += src[j]
                            src += ow
    return out


def maxpool_forward(floating[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride,
                    Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t b, ch, i, j, ki, kj, best_idx
    cdef floating best, v
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c, oh, ow), dtype=dtype)
    idx = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, :, ::1] ix = idx
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        best = x[b, ch, i * stride, j * stride]
                        best_idx = 0
                        for ki in range(k):
                            for kj in range(k):
                                v = x[b, ch, i * stride + ki, j * stride + kj]
                                if v > best:
                                    best = v
                                    best_idx = ki * k + kj
                        o[b, ch, i, j] = best
                        ix[b, ch, i, j] = best_idx
    return out, idx


def maxpool_backward(floating[:, :, :, ::1] grad, cnp.int64_t[:, :, :, ::1] idx,
                     Py_ssize_t h, Py_ssize_t w, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    cdef Py_ssize_t b, ch, i, j, ki, kj
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    with nogil:
        for ki in range(k):
            for kj in range(k):
                for b in range(n):
                    for ch in range(c):
                        for i in range(oh):
                            for j in range(ow):
                                if idx[b, ch, i, j] == ki * k + kj:
                                    o[b, ch, i * stride + ki, j * stride + kj] += grad[b, ch, i, j]
    return out


def avgpool_forward(floating[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride,
                    Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t b, ch, i, j, ki, kj
    cdef floating acc
    cdef floating area = <floating>(k * k)
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c, oh, ow), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        acc = 0
                        for ki in range(k):
                            for kj in range(k):
                                acc = acc + x[b, ch, i * stride + ki, j * stride + kj]
                        o[b, ch, i, j] = acc / area
    return out


def avgpool_backward(floating[:, :, :, ::1] grad, Py_ssize_t h, Py_ssize_t w,
                     Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    cdef Py_ssize_t b, ch, i, j, ki, kj
    cdef floating area = <floating>(k * k)
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    with nogil:
        for ki in range(k):
            for kj in range(k):
                for b in range(n):
                    for ch in range(c):
                        for i in range(oh):
                            for j in range(ow):
                                o[b, ch, i * stride + ki, j * stride + kj] += grad[b, ch, i, j] / area
    return out
