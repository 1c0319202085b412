"""Pure-numpy implementations of the sliding-window kernels.

These are the fallback for the compiled ``_kernels`` extension and must stay
bit-identical to it: every accumulation visits kernel offsets in (ki, kj)
row-major order.
"""
import numpy as np


def im2col(xp, k, stride, oh, ow):
    """Unfold padded ``xp`` (N, C, Hp, Wp) into columns of shape (C*k*k, N*oh*ow)."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * oh * ow)


def col2im(cols, n, c, hp, wp, k, stride, oh, ow):
    """Adjoint of :func:`im2col`: scatter-add columns back onto a padded image."""
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, n, oh, ow)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + (oh - 1) * stride + 1 : stride,
                kj : kj + (ow - 1) * stride + 1 : stride] += cols[:, ki, kj].transpose(1, 0, 2, 3)
    return out


def maxpool_forward(x, k, stride, oh, ow):
    """Window maxima plus flat in-window argmax (first maximum wins)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    flat = win.reshape(win.shape[:4] + (k * k,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward(grad, idx, h, w, k, stride):
    n, c, oh, ow = grad.shape
    out = np.zeros((n, c, h, w), dtype=grad.dtype)
    for ki in range(k):
        for kj in range(k):
            sel = np.where(idx == ki * k + kj, grad, 0).astype(grad.dtype)
            out[:, :, ki : ki + (oh - 1) * stride + 1 : stride,
                kj : kj + (ow - 1) * stride + 1 : stride] += sel
    return out


def avgpool_forward(x, k, stride, oh, ow):
    n, c = x.shape[:2]
    acc = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            acc += x[:, :, ki : ki + (oh - 1) * stride + 1 : stride,
                     kj : kj + (ow - 1) * stride + 1 : stride]
    return acc / x.dtype.type(k * k)


def avgpool_backward(grad, h, w, k, stride):
    n, c, oh, ow = grad.shape
    g = grad / grad.dtype.type(k * k)
    out = np.zeros((n, c, h, w), dtype=grad.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + (oh - 1) * stride + 1 : stride,
                kj : kj + (ow - 1) * stride + 1 : stride] += g
    return out
