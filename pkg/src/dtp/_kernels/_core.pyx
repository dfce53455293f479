# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled spatial kernels.

Bit-for-bit compatible with ``fallback.py``: same results, same accumulation
order in every scatter-add.  Compiled without fp contraction so a*b + c*d
rounds exactly like the numpy expression it mirrors.
"""

import numpy as np

cimport numpy as cnp
from cython cimport floating

from dtp._kernels.fallback import lerp_tables

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    cdef Py_ssize_t L = ho * wo

    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((c * k * k, n * L), dtype=dtype)
    cdef floating[:, ::1] col = out

    cdef Py_ssize_t ci, ki, kj, ni, i, j, hi, wi, row, base
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for ni in range(n):
                    base = ni * L
                    for i in range(ho):
                        hi = i * stride + ki - pad
                        if hi < 0 or hi >= h:
                            continue
                        for j in range(wo):
                            wi = j * stride + kj - pad
                            if 0 <= wi < w:
                                col[row, base + i * wo + j] = x[ni, ci, hi, wi]
    return out


def col2im(floating[:, :] col, x_shape, int k, int stride, int pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    cdef Py_ssize_t L = ho * wo

    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = out

    # Tap-major accumulation to match the fallback's slice-add order.
    cdef Py_ssize_t ci, ki, kj, ni, i, j, hi, wi, row, base
    for ki in range(k):
        for kj in range(k):
            for ci in range(c):
                row = (ci * k + ki) * k + kj
                for ni in range(n):
                    base = ni * L
                    for i in range(ho):
                        hi = i * stride + ki - pad
                        if hi < 0 or hi >= h:
                            continue
                        for j in range(wo):
                            wi = j * stride + kj - pad
                            if 0 <= wi < w:
                                gx[ni, ci, hi, wi] += col[row, base + i * wo + j]
    return out


def maxpool2x2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t h2 = h // 2, w2 = w // 2

    dtype = np.float32 if floating is float else np.float64
    yout = np.empty((n, c, h2, w2), dtype=dtype)
    iout = np.empty((n, c, h2, w2), dtype=np.uint8)
    cdef floating[:, :, :, ::1] y = yout
    cdef cnp.uint8_t[:, :, :, ::1] idx = iout

    cdef Py_ssize_t ni, ci, i, j, dh, dw
    cdef floating best, v
    cdef cnp.uint8_t bi
    for ni in range(n):
        for ci in range(c):
            for i in range(h2):
                for j in range(w2):
                    best = x[ni, ci, 2 * i, 2 * j]
                    bi = 0
                    for dh in range(2):
                        for dw in range(2):
                            v = x[ni, ci, 2 * i + dh, 2 * j + dw]
                            if v > best:  # strict: ties keep first occurrence
                                best = v
                                bi = <cnp.uint8_t>(2 * dh + dw)
                    y[ni, ci, i, j] = best
                    idx[ni, ci, i, j] = bi
    return yout, iout


def maxpool2x2_backward(floating[:, :, :, ::1] gy, cnp.uint8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], h2 = gy.shape[2], w2 = gy.shape[3]

    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, 2 * h2, 2 * w2), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = out

    cdef Py_ssize_t ni, ci, i, j
    cdef cnp.uint8_t b
    for ni in range(n):
        for ci in range(c):
            for i in range(h2):
                for j in range(w2):
                    b = idx[ni, ci, i, j]
                    gx[ni, ci, 2 * i + (b >> 1), 2 * j + (b & 1)] = gy[ni, ci, i, j]
    return out


def upsample2x_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]

    dtype = np.float32 if floating is float else np.float64
    i0a, i1a, w0ha, w1ha = lerp_tables(h, dtype)
    j0a, j1a, w0wa, w1wa = lerp_tables(w, dtype)
    cdef Py_ssize_t[::1] i0 = i0a, i1 = i1a, j0 = j0a, j1 = j1a
    cdef floating[::1] w0h = w0ha, w1h = w1ha, w0w = w0wa, w1w = w1wa

    tmp = np.empty((n, c, 2 * h, w), dtype=dtype)
    out = np.empty((n, c, 2 * h, 2 * w), dtype=dtype)
    cdef floating[:, :, :, ::1] t = tmp
    cdef floating[:, :, :, ::1] y = out

    cdef Py_ssize_t ni, ci, d, j
    # rows pass then columns pass, as in the fallback
    for ni in range(n):
        for ci in range(c):
            for d in range(2 * h):
                for j in range(w):
                    t[ni, ci, d, j] = w0h[d] * x[ni, ci, i0[d], j] + w1h[d] * x[ni, ci, i1[d], j]
            for d in range(2 * h):
                for j in range(2 * w):
                    y[ni, ci, d, j] = w0w[j] * t[ni, ci, d, j0[j]] + w1w[j] * t[ni, ci, d, j1[j]]
    return out


def upsample2x_backward(floating[:, :, :, ::1] gy):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], h2 = gy.shape[2], w2 = gy.shape[3]
    cdef Py_ssize_t h = h2 // 2, w = w2 // 2

    dtype = np.float32 if floating is float else np.float64
    i0a, i1a, w0ha, w1ha = lerp_tables(h, dtype)
    j0a, j1a, w0wa, w1wa = lerp_tables(w, dtype)
    cdef Py_ssize_t[::1] i0 = i0a, i1 = i1a, j0 = j0a, j1 = j1a
    cdef floating[::1] w0h = w0ha, w1h = w1ha, w0w = w0wa, w1w = w1wa

    gtmp = np.zeros((n, c, h2, w), dtype=dtype)
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] gt = gtmp
    cdef floating[:, :, :, ::1] gx = out

    cdef Py_ssize_t ni, ci, d, r
    # W-axis adjoint: all w0 contributions in ascending d, then all w1,
    # matching the fallback's two np.add.at calls.
    for d in range(w2):
        for ni in range(n):
            for ci in range(c):
                for r in range(h2):
                    gt[ni, ci, r, j0[d]] += w0w[d] * gy[ni, ci, r, d]
    for d in range(w2):
        for ni in range(n):
            for ci in range(c):
                for r in range(h2):
                    gt[ni, ci, r, j1[d]] += w1w[d] * gy[ni, ci, r, d]
    # H-axis adjoint, same two-pass order.
    for d in range(h2):
        for ni in range(n):
            for ci in range(c):
                for r in range(w):
                    gx[ni, ci, i0[d], r] += w0h[d] * gt[ni, ci, d, r]
    for d in range(h2):
        for ni in range(n):
            for ci in range(c):
                for r in range(w):
                    gx[ni, ci, i1[d], r] += w1h[d] * gt[ni, ci, d, r]
    return out
