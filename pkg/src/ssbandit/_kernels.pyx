# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Signatures mirror ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.string cimport memcpy

cnp.import_array()

NAME = "cython"


def im2col(double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride=1):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = (h - k) // stride + 1, wo = (w - k) // stride + 1
    cdef Py_ssize_t row_len = k * c
    cols_arr = np.empty((n * ho * wo, k * k * c), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, oh, ow, ki, r = 0
    with nogil:
        for b in range(n):
            for oh in range(ho):
                for ow in range(wo):
                    for ki in range(k):
                        memcpy(&cols[r, ki * row_len], &x[b, oh * stride + ki, ow * stride, 0],
                               row_len * sizeof(double))
                    r += 1
    return cols_arr


def col2im(double[:, ::1] cols, x_shape, Py_ssize_t k, Py_ssize_t stride=1):
    cdef Py_ssize_t n = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3]
    cdef Py_ssize_t ho = (h - k) // stride + 1, wo = (w - k) // stride + 1
    cdef Py_ssize_t row_len = k * c
    out_arr = np.zeros((n, h, w, c), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oh, ow, ki, j, r = 0
    cdef double *dst
    cdef double *src
    with nogil:
        for b in range(n):
            for oh in range(ho):
                for ow in range(wo):
                    for ki in range(k):
                        dst = &out[b, oh * stride + ki, ow * stride, 0]
                        src = &cols[r, ki * row_len]
                        for j in range(row_len):
                            dst[j] += src[j]
                    r += 1
    return out_arr


def maxpool_forward(double[:, :, :, ::1] x, Py_ssize_t p):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = h // p, wo = w // p
    out_arr = np.empty((n, ho, wo, c), dtype=np.float64)
    idx_arr = np.empty((n, ho, wo, c), dtype=np.int8)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, i, j, ch, di, dj
    cdef double *best
    cdef double *src
    cdef cnp.int8_t *arg
    cdef cnp.int8_t a
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    best = &out[b, i, j, 0]
                    arg = &idx[b, i, j, 0]
                    src = &x[b, i * p, j * p, 0]
                    for ch in range(c):
                        best[ch] = src[ch]
                        arg[ch] = 0
                    for di in range(p):
                        for dj in range(p):
                            if di == 0 and dj == 0:
                                continue
                            src = &x[b, i * p + di, j * p + dj, 0]
                            a = <cnp.int8_t>(di * p + dj)
                            for ch in range(c):
                                if src[ch] > best[ch]:
                                    best[ch] = src[ch]
                                    arg[ch] = a
    return out_arr, idx_arr


def maxpool_backward(double[:, :, :, ::1] dout, cnp.int8_t[:, :, :, ::1] idx, x_shape, Py_ssize_t p):
    cdef Py_ssize_t n = dout.shape[0], ho = dout.shape[1], wo = dout.shape[2], c = dout.shape[3]
    dx_arr = np.zeros(tuple(x_shape), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, i, j, ch, a
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        a = idx[b, i, j, ch]
                        dx[b, i * p + a // p, j * p + a % p, ch] = dout[b, i, j, ch]
    return dx_arr


cdef inline double _dot(const double* a, const double* b, Py_ssize_t n) noexcept nogil:
    # four independent partial sums so the loop is not bound by add latency
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t j = 0
    while j + 4 <= n:
        s0 += a[j] * b[j]
        s1 += a[j + 1] * b[j + 1]
        s2 += a[j + 2] * b[j + 2]
        s3 += a[j + 3] * b[j + 3]
        j += 4
    while j < n:
        s0 += a[j] * b[j]
        j += 1
    return (s0 + s1) + (s2 + s3)


def rank_one_update(double[:, ::1] a, double[::1] x):
    cdef Py_ssize_t d = a.shape[0], i, j
    cdef double xi
    with nogil:
        for i in range(d):
            xi = x[i]
            for j in range(d):
                a[i, j] += xi * x[j]


def sherman_morrison(double[:, ::1] ainv, double[::1] x):
    cdef Py_ssize_t d = ainv.shape[0], i, j
    cdef double[::1] u = np.empty(d, dtype=np.float64)
    cdef double vi, root, denom = 1.0
    with nogil:
        for i in range(d):
            u[i] = _dot(&ainv[i, 0], &x[0], d)
        for i in range(d):
            denom += x[i] * u[i]
        root = sqrt(denom)
        for i in range(d):
            u[i] = u[i] / root
        for i in range(d):
            vi = u[i]
            for j in range(d):
                ainv[i, j] -= vi * u[j]
    return denom


def quad_form(double[:, ::1] a, double[::1] z):
    # reads the upper triangle only
    cdef Py_ssize_t d = a.shape[0], i
    cdef double total = 0.0
    if d == 0:
        return total
    with nogil:
        for i in range(d - 1):
            total += z[i] * (a[i, i] * z[i] + 2.0 * _dot(&a[i, i + 1], &z[i + 1], d - i - 1))
        total += z[d - 1] * a[d - 1, d - 1] * z[d - 1]
    return total
