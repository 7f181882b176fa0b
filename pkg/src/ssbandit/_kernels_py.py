"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
Images are NHWC float64 arrays; im2col column order is (kernel_row,
kernel_col, channel).
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "python"


def _out_size(size, k, stride):
    return (size - k) // stride + 1


def im2col(x, k, stride=1):
    """Unfold ``x`` (n, H, W, C) into patch rows of shape (n*Ho*Wo, k*k*C)."""
    n, h, w, c = x.shape
    ho, wo = _out_size(h, k, stride), _out_size(w, k, stride)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :ho, :wo]
    # (n, ho, wo, c, ki, kj) -> (n, ho, wo, ki, kj, c)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)


def col2im(cols, x_shape, k, stride=1):
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an image."""
    n, h, w, c = x_shape
    ho, wo = _out_size(h, k, stride), _out_size(w, k, stride)
    patches = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros(x_shape)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += patches[:, :, :, i, j, :]
    return out


def maxpool_forward(x, p):
    """Non-overlapping p x p max pooling; trailing rows/cols that do not fill a window are dropped.

    Returns the pooled array and the flat in-window index of the first maximum.
    """
    n, h, w, c = x.shape
    ho, wo = h // p, w // p
    win = x[:, :ho * p, :wo * p, :].reshape(n, ho, p, wo, p, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, ho, wo, c, p * p)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool_backward(dout, idx, x_shape, p):
    n, h, w, c = x_shape
    ho, wo = h // p, w // p
    win = np.zeros((n, ho, wo, c, p * p))
    np.put_along_axis(win, idx.astype(np.intp)[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape)
    dx[:, :ho * p, :wo * p, :] = (
        win.reshape(n, ho, wo, c, p, p).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * p, wo * p, c)
    )
    return dx


def rank_one_update(a, x):
    """In place: a += x x^T."""
    a += np.outer(x, x)


def sherman_morrison(ainv, x):
    """In-place rank-one update of ``ainv`` = A^-1 to (A + x x^T)^-1.

    Returns ``1 + x^T A^-1 x``. The correction is the outer product of
    ``v = u / sqrt(denom)`` with itself, so a symmetric input stays exactly symmetric.
    """
    u = ainv @ x
    denom = 1.0 + float(x @ u)
    v = u / math.sqrt(denom)
    ainv -= np.outer(v, v)
    return denom


def quad_form(a, z):
    """z^T A z for a symmetric matrix ``a``."""
    return float(z @ (a @ z))
