# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel backend.

Mirrors the numpy fallback operation for operation: identical formulas,
identical left-to-right reduction order, no fused multiply-adds (the build
passes -ffp-contract=off). Arithmetic-only kernels are bit-identical to the
fallback; kernels calling libm exp may differ from numpy's vectorized exp
in the last ulp.
"""

import numpy as np

from libc.math cimport exp, sqrt


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t p = a.shape[0], r = a.shape[1], q = b.shape[1]
    out_arr = np.zeros((p, q))
    cdef double[:, ::1] c = out_arr
    cdef Py_ssize_t i, k, j
    cdef double aik
    for i in range(p):
        for k in range(r):
            aik = a[i, k]
            for j in range(q):
                c[i, j] = c[i, j] + aik * b[k, j]
    return out_arr


def row_softmax_fwd(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] s = out_arr
    cdef Py_ssize_t i, j
    cdef double mx, denom, inv
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        denom = 0.0
        for j in range(m):
            s[i, j] = exp(x[i, j] - mx)
            denom = denom + s[i, j]
        inv = 1.0 / denom
        for j in range(m):
            s[i, j] = s[i, j] * inv
    return out_arr


def row_softmax_bwd(double[:, ::1] s, double[:, ::1] ds):
    cdef Py_ssize_t n = s.shape[0], m = s.shape[1]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] dx = out_arr
    cdef Py_ssize_t i, j
    cdef double t
    for i in range(n):
        t = 0.0
        for j in range(m):
            t = t + ds[i, j] * s[i, j]
        for j in range(m):
            dx[i, j] = s[i, j] * (ds[i, j] - t)
    return out_arr


def layer_norm_fwd(double[:, ::1] x, double[::1] gain, double[::1] bias,
                   double eps):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1]
    y_arr = np.empty((n, h))
    xhat_arr = np.empty((n, h))
    inv_std_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr, xhat = xhat_arr
    cdef double[::1] inv_std = inv_std_arr
    cdef Py_ssize_t i, j
    cdef double s, mu, d, var, inv
    for i in range(n):
        s = 0.0
        for j in range(h):
            s = s + x[i, j]
        mu = s / h
        var = 0.0
        for j in range(h):
            d = x[i, j] - mu
            xhat[i, j] = d
            var = var + d * d
        var = var / h
        inv = 1.0 / sqrt(var + eps)
        inv_std[i] = inv
        for j in range(h):
            xhat[i, j] = xhat[i, j] * inv
            y[i, j] = xhat[i, j] * gain[j] + bias[j]
    return y_arr, xhat_arr, inv_std_arr


def layer_norm_bwd(double[:, ::1] dy, double[:, ::1] xhat,
                   double[::1] inv_std, double[::1] gain):
    cdef Py_ssize_t n = dy.shape[0], h = dy.shape[1]
    dx_arr = np.empty((n, h))
    dgain_arr = np.zeros(h)
    dbias_arr = np.zeros(h)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr, dbias = dbias_arr
    cdef Py_ssize_t i, j
    cdef double a, b, dxh, inv_h = 1.0 / h
    for i in range(n):
        for j in range(h):
            dgain[j] = dgain[j] + dy[i, j] * xhat[i, j]
            dbias[j] = dbias[j] + dy[i, j]
    for i in range(n):
        a = 0.0
        b = 0.0
        for j in range(h):
            dxh = dy[i, j] * gain[j]
            a = a + dxh
            b = b + dxh * xhat[i, j]
        for j in range(h):
            dxh = dy[i, j] * gain[j]
            dx[i, j] = (dxh - (a + xhat[i, j] * b) * inv_h) * inv_std[i]
    return dx_arr, dgain_arr, dbias_arr


def l2norm_rows_fwd(double[:, ::1] x, double eps):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1]
    y_arr = np.empty((n, h))
    norms_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] norms = norms_arr
    cdef Py_ssize_t i, j
    cdef double s, nrm, inv
    for i in range(n):
        s = 0.0
        for j in range(h):
            s = s + x[i, j] * x[i, j]
        nrm = sqrt(s)
        norms[i] = nrm
        inv = 1.0 / (nrm if nrm > eps else eps)
        for j in range(h):
            y[i, j] = x[i, j] * inv
    return y_arr, norms_arr


def l2norm_rows_bwd(double[:, ::1] dy, double[:, ::1] x, double[::1] norms,
                    double eps):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1]
    dx_arr = np.empty((n, h))
    cdef double[:, ::1] dx = dx_arr
    cdef Py_ssize_t i, j
    cdef double s, inv, c
    for i in range(n):
        if norms[i] > eps:
            inv = 1.0 / norms[i]
            s = 0.0
            for j in range(h):
                s = s + x[i, j] * dy[i, j]
            c = ((s * inv) * inv) * inv
        else:
            inv = 1.0 / eps
            c = 0.0
        for j in range(h):
            dx[i, j] = dy[i, j] * inv - x[i, j] * c
    return dx_arr


def sq_dist_matrix(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t p = a.shape[0], q = b.shape[0], h = a.shape[1]
    out_arr = np.empty((p, q))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double s, d
    for i in range(p):
        for j in range(q):
            s = 0.0
            for k in range(h):
                d = a[i, k] - b[j, k]
                s = s + d * d
            out[i, j] = s
    return out_arr
