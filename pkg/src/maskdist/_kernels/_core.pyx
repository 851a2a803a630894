# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled row-wise kernels: fused softmax/layernorm/gelu plus the
gather/scatter and categorical-sampling inner loops.

The numpy fallback in ``numpy_ref.py`` mirrors every function here.
"""

from libc.math cimport exp, log, sqrt, erf

import numpy as np

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


def softmax_rows(double[:, ::1] x):
    # shift by the row max in a fused pass, then lean on numpy's SIMD exp
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1], i, j
    shifted_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] shifted = shifted_arr
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        for j in range(v):
            shifted[i, j] = x[i, j] - m
    out_arr = np.exp(shifted_arr)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        s = 0.0
        for j in range(v):
            s += out[i, j]
        s = 1.0 / s
        for j in range(v):
            out[i, j] *= s
    return out_arr


def softmax_backward_rows(double[:, ::1] y, double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], v = y.shape[1], i, j
    inner_arr = np.empty((n, 1), dtype=np.float64)
    cdef double[:, ::1] inner = inner_arr
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(v):
            acc += gy[i, j] * y[i, j]
        inner[i, 0] = acc
    return np.asarray(y) * (np.asarray(gy) - inner_arr)


def log_softmax_rows(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1], i, j
    out_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        for j in range(v):
            out[i, j] = x[i, j] - m
    exp_arr = np.exp(out_arr)
    cdef double[:, ::1] exps = exp_arr
    for i in range(n):
        s = 0.0
        for j in range(v):
            s += exps[i, j]
        s = log(s)
        for j in range(v):
            out[i, j] -= s
    return out_arr


def log_softmax_backward_rows(double[:, ::1] out, double[:, ::1] gy):
    cdef Py_ssize_t n = out.shape[0], v = out.shape[1], i, j
    sums_arr = np.empty((n, 1), dtype=np.float64)
    cdef double[:, ::1] sums = sums_arr
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(v):
            acc += gy[i, j]
        sums[i, 0] = acc
    return np.asarray(gy) - np.exp(np.asarray(out)) * sums_arr


def layernorm_rows(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    mean_arr = np.empty(n, dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] mean = mean_arr, rstd = rstd_arr
    cdef double mu, var, dev
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            dev = x[i, j] - mu
            var += dev * dev
        mean[i] = mu
        rstd[i] = 1.0 / sqrt(var / d + eps)
    xa = np.asarray(x)
    out_arr = (xa - mean_arr[:, None]) * (rstd_arr[:, None] * np.asarray(gain)) \
        + np.asarray(bias)
    return out_arr, mean_arr, rstd_arr


def layernorm_backward_rows(double[:, ::1] x, double[::1] gain,
                            double[::1] mean, double[::1] rstd,
                            double[:, ::1] gy):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    gx_arr = np.empty((n, d), dtype=np.float64)
    ggain_arr = np.zeros(d, dtype=np.float64)
    gbias_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr, gbias = gbias_arr
    cdef double m1, m2, xhat, gxh
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            gxh = gy[i, j] * gain[j]
            m1 += gxh
            m2 += gxh * xhat
            ggain[j] += gy[i, j] * xhat
            gbias[j] += gy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            gx[i, j] = rstd[i] * (gy[i, j] * gain[j] - m1 - xhat * m2)
    return gx_arr, ggain_arr, gbias_arr


def gelu_forward(double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = 0.5 * x[i] * (1.0 + erf(x[i] * INV_SQRT2))
    return out_arr


def gelu_backward(double[::1] x, double[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    gx_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] gx = gx_arr
    cdef double cdf, pdf
    for i in range(n):
        cdf = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
        pdf = INV_SQRT2PI * exp(-0.5 * x[i] * x[i])
        gx[i] = gy[i] * (cdf + x[i] * pdf)
    return gx_arr


def gather_rows(double[:, ::1] table, long[::1] idx):
    cdef Py_ssize_t n = idx.shape[0], d = table.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r
    for i in range(n):
        r = idx[i]
        for j in range(d):
            out[i, j] = table[r, j]
    return out_arr


def scatter_add_rows(double[:, ::1] gtable, long[::1] idx, double[:, ::1] gy):
    cdef Py_ssize_t n = idx.shape[0], d = gtable.shape[1], i, j
    cdef Py_ssize_t r
    for i in range(n):
        r = idx[i]
        for j in range(d):
            gtable[r, j] += gy[i, j]


def categorical_rows(double[:, ::1] probs, double[::1] u):
    cdef Py_ssize_t n = probs.shape[0], v = probs.shape[1], i, j
    out_arr = np.empty(n, dtype=np.int64)
    cdef long[::1] out = out_arr
    cdef double acc
    for i in range(n):
        acc = 0.0
        out[i] = v - 1
        for j in range(v):
            acc += probs[i, j]
            if u[i] < acc:
                out[i] = j
                break
    return out_arr
