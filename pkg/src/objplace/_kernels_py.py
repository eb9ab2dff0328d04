"""Pure-numpy reference kernels.

These are the fallback used when the compiled ``_ckernels`` extension is not
available. The compiled module implements exactly the same signatures and
must agree with these to rounding.

Layout conventions shared by both backends:

* images are ``(B, C, H, W)`` float64, C-contiguous;
* sample coordinates ``ix``/``iy`` are in pixel units, pixel ``i`` has its
  centre at ``i``; samples outside the image read as zero;
* im2col columns are ``(B, Ho, Wo, C * k * k)`` with the trailing axis
  ordered ``(c, ki, kj)`` so that a ``(Co, C, k, k)`` weight reshapes to
  ``(Co, C * k * k)`` directly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _corners(ix, iy, H, W):
    x0 = np.floor(ix)
    y0 = np.floor(iy)
    wx1 = ix - x0
    wy1 = iy - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = []
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            xc = x0 + dx
            yc = y0 + dy
            valid = (xc >= 0) & (xc < W) & (yc >= 0) & (yc < H)
            out.append((np.clip(xc, 0, W - 1), np.clip(yc, 0, H - 1), wx, wy, valid))
    return out


def _gather(src, xc, yc):
    # src (B,C,H,W), xc/yc (B,Ho,Wo) -> (B,C,Ho,Wo)
    B = src.shape[0]
    b = np.arange(B).reshape(B, 1, 1)
    return np.moveaxis(src[b, :, yc, xc], -1, 1)


def grid_sample_forward(src, ix, iy):
    B, C, H, W = src.shape
    out = np.zeros((B, C) + ix.shape[1:], dtype=np.float64)
    for xc, yc, wx, wy, valid in _corners(ix, iy, H, W):
        w = (wx * wy * valid)[:, None]
        out += w * _gather(src, xc, yc)
    return out


def grid_sample_backward(src, ix, iy, gout):
    B, C, H, W = src.shape
    Ho, Wo = ix.shape[1:]
    gix = np.zeros(ix.shape, dtype=np.float64)
    giy = np.zeros(iy.shape, dtype=np.float64)
    flat_idx = []
    flat_w = []
    base = (np.arange(B).reshape(B, 1, 1, 1) * C + np.arange(C).reshape(1, C, 1, 1)) * (H * W)
    corners = _corners(ix, iy, H, W)
    # sign of d(weight)/d(coordinate) for the (dy, dx) corner order used by _corners
    signs = ((-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0))
    for (xc, yc, wx, wy, valid), (sx, sy) in zip(corners, signs):
        v = _gather(src, xc, yc) * valid[:, None]
        gv = (gout * v).sum(axis=1)
        gix += sx * wy * gv
        giy += sy * wx * gv
        w = (wx * wy * valid)[:, None] * gout
        idx = base + (yc * W + xc)[:, None]
        flat_idx.append(idx.ravel())
        flat_w.append(w.ravel())
    gsrc = np.bincount(
        np.concatenate(flat_idx), weights=np.concatenate(flat_w), minlength=B * C * H * W
    ).reshape(B, C, H, W)
    return gsrc, gix, giy


def im2col(x, k, stride, pad):
    """(B, C, H, W) -> (B, C*k*k, Ho, Wo), rows ordered (c, ki, kj)."""
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = x[:, :, ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride]
    return cols.reshape(B, C * k * k, Ho, Wo)


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to (B, C, H, W)."""
    B, C, H, W = shape
    Ho, Wo = cols.shape[2], cols.shape[3]
    c6 = cols.reshape(B, C, k, k, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride] += c6[:, :, ki, kj]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad : pad + H, pad : pad + W])
    return xp
