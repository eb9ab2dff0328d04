# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; same contract as ``objplace._kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def grid_sample_forward(const double[:, :, :, ::1] src,
                        const double[:, :, ::1] ix,
                        const double[:, :, ::1] iy):
    cdef Py_ssize_t B = src.shape[0], C = src.shape[1], H = src.shape[2], W = src.shape[3]
    cdef Py_ssize_t Ho = ix.shape[1], Wo = ix.shape[2]
    out_arr = np.zeros((B, C, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j
    cdef long x0, y0, x1, y1
    cdef double fx, fy, wx0, wx1, wy0, wy1, w00, w01, w10, w11
    cdef bint vx0, vx1, vy0, vy1
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                fx = floor(ix[b, i, j])
                fy = floor(iy[b, i, j])
                x0 = <long>fx
                y0 = <long>fy
                x1 = x0 + 1
                y1 = y0 + 1
                wx1 = ix[b, i, j] - fx
                wy1 = iy[b, i, j] - fy
                wx0 = 1.0 - wx1
                wy0 = 1.0 - wy1
                vx0 = 0 <= x0 < W
                vx1 = 0 <= x1 < W
                vy0 = 0 <= y0 < H
                vy1 = 0 <= y1 < H
                w00 = wx0 * wy0 if (vx0 and vy0) else 0.0
                w01 = wx1 * wy0 if (vx1 and vy0) else 0.0
                w10 = wx0 * wy1 if (vx0 and vy1) else 0.0
                w11 = wx1 * wy1 if (vx1 and vy1) else 0.0
                for c in range(C):
                    if w00 != 0.0:
                        out[b, c, i, j] += w00 * src[b, c, y0, x0]
                    if w01 != 0.0:
                        out[b, c, i, j] += w01 * src[b, c, y0, x1]
                    if w10 != 0.0:
                        out[b, c, i, j] += w10 * src[b, c, y1, x0]
                    if w11 != 0.0:
                        out[b, c, i, j] += w11 * src[b, c, y1, x1]
    return out_arr


def grid_sample_backward(const double[:, :, :, ::1] src,
                         const double[:, :, ::1] ix,
                         const double[:, :, ::1] iy,
                         const double[:, :, :, ::1] gout):
    cdef Py_ssize_t B = src.shape[0], C = src.shape[1], H = src.shape[2], W = src.shape[3]
    cdef Py_ssize_t Ho = ix.shape[1], Wo = ix.shape[2]
    gsrc_arr = np.zeros((B, C, H, W), dtype=np.float64)
    gix_arr = np.zeros((B, Ho, Wo), dtype=np.float64)
    giy_arr = np.zeros((B, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] gsrc = gsrc_arr
    cdef double[:, :, ::1] gix = gix_arr
    cdef double[:, :, ::1] giy = giy_arr
    cdef Py_ssize_t b, c, i, j
    cdef long x0, y0, x1, y1
    cdef double fx, fy, wx0, wx1, wy0, wy1, g, v00, v01, v10, v11, ax, ay
    cdef bint vx0, vx1, vy0, vy1
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                fx = floor(ix[b, i, j])
                fy = floor(iy[b, i, j])
                x0 = <long>fx
                y0 = <long>fy
                x1 = x0 + 1
                y1 = y0 + 1
                wx1 = ix[b, i, j] - fx
                wy1 = iy[b, i, j] - fy
                wx0 = 1.0 - wx1
                wy0 = 1.0 - wy1
                vx0 = 0 <= x0 < W
                vx1 = 0 <= x1 < W
                vy0 = 0 <= y0 < H
                vy1 = 0 <= y1 < H
                ax = 0.0
                ay = 0.0
                for c in range(C):
                    g = gout[b, c, i, j]
                    if g == 0.0:
                        continue
                    v00 = src[b, c, y0, x0] if (vx0 and vy0) else 0.0
                    v01 = src[b, c, y0, x1] if (vx1 and vy0) else 0.0
                    v10 = src[b, c, y1, x0] if (vx0 and vy1) else 0.0
                    v11 = src[b, c, y1, x1] if (vx1 and vy1) else 0.0
                    ax += g * (wy0 * (v01 - v00) + wy1 * (v11 - v10))
                    ay += g * (wx0 * (v10 - v00) + wx1 * (v11 - v01))
                    if vx0 and vy0:
                        gsrc[b, c, y0, x0] += g * wx0 * wy0
                    if vx1 and vy0:
                        gsrc[b, c, y0, x1] += g * wx1 * wy0
                    if vx0 and vy1:
                        gsrc[b, c, y1, x0] += g * wx0 * wy1
                    if vx1 and vy1:
                        gsrc[b, c, y1, x1] += g * wx1 * wy1
                gix[b, i, j] = ax
                giy[b, i, j] = ay
    return gsrc_arr, gix_arr, giy_arr


def im2col(const double[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    cols_arr = np.zeros((B, C * k * k, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] cols = cols_arr
    cdef Py_ssize_t b, c, i, j, ki, kj, r, row, j0, j1
    for b in range(B):
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    j0, j1 = _valid_range(kj - pad, stride, W, Wo)
                    for i in range(Ho):
                        r = i * stride + ki - pad
                        if r < 0 or r >= H:
                            continue
                        for j in range(j0, j1):
                            cols[b, row, i, j] = x[b, c, r, j * stride + kj - pad]
    return cols_arr


def col2im(const double[:, :, :, ::1] cols, tuple shape, int k, int stride, int pad):
    cdef Py_ssize_t B = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = cols.shape[2], Wo = cols.shape[3]
    x_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] x = x_arr
    cdef Py_ssize_t b, c, i, j, ki, kj, r, row, j0, j1
    for b in range(B):
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    j0, j1 = _valid_range(kj - pad, stride, W, Wo)
                    for i in range(Ho):
                        r = i * stride + ki - pad
                        if r < 0 or r >= H:
                            continue
                        for j in range(j0, j1):
                            x[b, c, r, j * stride + kj - pad] += cols[b, row, i, j]
    return x_arr


cdef inline (Py_ssize_t, Py_ssize_t) _valid_range(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t W, Py_ssize_t Wo):
    # output columns j with 0 <= j * stride + off < W
    cdef Py_ssize_t j0 = 0, j1 = Wo
    while j0 < Wo and j0 * stride + off < 0:
        j0 += 1
    while j1 > j0 and (j1 - 1) * stride + off >= W:
        j1 -= 1
    return j0, j1
