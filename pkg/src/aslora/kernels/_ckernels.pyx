# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels.

Every function takes C-contiguous 2-D (or 1-D) float32/float64 buffers and
mirrors the signature of its counterpart in ``_pykernels``.  Reductions are
accumulated in double precision regardless of the storage dtype.
"""
import numpy as np

from cython cimport floating
from libc.math cimport exp, expf, sqrt

cdef inline double _exp(floating v) noexcept nogil:
    if floating is float:
        return expf(v)
    return exp(v)


cdef inline object _dtype_of(floating[:, ::1] x):
    if floating is float:
        return np.float32
    return np.float64


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out = np.empty((n, k), dtype=_dtype_of(x))
    cdef floating[:, ::1] y = out
    cdef double m, s, e
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            e = _exp(<floating>(x[i, j] - m))
            y[i, j] = <floating>e
            s += e
        for j in range(k):
            y[i, j] = <floating>(y[i, j] / s)
    return out


def softmax_bwd(floating[:, ::1] y, floating[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], k = y.shape[1], i, j
    out = np.empty((n, k), dtype=_dtype_of(y))
    cdef floating[:, ::1] dx = out
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += <double>y[i, j] * dy[i, j]
        for j in range(k):
            dx[i, j] = <floating>(y[i, j] * (dy[i, j] - dot))
    return out


def layer_norm_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    dt = _dtype_of(x)
    y_arr = np.empty((n, k), dtype=dt)
    xhat_arr = np.empty((n, k), dtype=dt)
    rstd_arr = np.empty(n, dtype=dt)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[::1] rstd = rstd_arr
    cdef double mean, var, d, r, h
    for i in range(n):
        mean = 0.0
        for j in range(k):
            mean += x[i, j]
        mean /= k
        var = 0.0
        for j in range(k):
            d = x[i, j] - mean
            var += d * d
        var /= k
        r = 1.0 / sqrt(var + eps)
        rstd[i] = <floating>r
        for j in range(k):
            h = (x[i, j] - mean) * r
            xhat[i, j] = <floating>h
            y[i, j] = <floating>(h * gamma[j] + beta[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(floating[:, ::1] dy, floating[:, ::1] xhat, floating[::1] rstd, floating[::1] gamma):
    cdef Py_ssize_t n = dy.shape[0], k = dy.shape[1], i, j
    dt = _dtype_of(dy)
    dx_arr = np.empty((n, k), dtype=dt)
    cdef floating[:, ::1] dx = dx_arr
    cdef double[::1] dg = np.zeros(k, dtype=np.float64)
    cdef double[::1] db = np.zeros(k, dtype=np.float64)
    cdef double a, b, g
    for i in range(n):
        a = 0.0
        b = 0.0
        for j in range(k):
            g = <double>dy[i, j] * gamma[j]
            a += g
            b += g * xhat[i, j]
            dg[j] += <double>dy[i, j] * xhat[i, j]
            db[j] += dy[i, j]
        a /= k
        b /= k
        for j in range(k):
            g = <double>dy[i, j] * gamma[j]
            dx[i, j] = <floating>(rstd[i] * (g - a - xhat[i, j] * b))
    return dx_arr, np.asarray(dg).astype(dt), np.asarray(db).astype(dt)


def running_mean_update(floating[::1] mean, floating[::1] w, long count):
    """In place: mean += (w - mean) / count."""
    cdef Py_ssize_t i, n = mean.shape[0]
    cdef double c = count
    for i in range(n):
        mean[i] = <floating>(mean[i] + (w[i] - mean[i]) / c)


def pairwise_l2(floating[:, ::1] rows):
    cdef Py_ssize_t g = rows.shape[0], n = rows.shape[1], i, j, q
    out = np.zeros((g, g), dtype=np.float64)
    cdef double[:, ::1] s = out
    cdef double acc, d
    for i in range(g):
        for j in range(i + 1, g):
            acc = 0.0
            for q in range(n):
                d = <double>rows[i, q] - <double>rows[j, q]
                acc += d * d
            s[i, j] = sqrt(acc)
            s[j, i] = s[i, j]
    return out
