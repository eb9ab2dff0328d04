"""Placement geometry: parameters -> affine warp -> composite, and back.

Images are numpy arrays or :class:`Tensor` objects shaped ``(C, H, W)``, or
batched ``(B, C, H, W)``; masks have one channel. Normalised coordinates
put pixel centres at ``(2i + 1) / W - 1`` with x to the right and y down,
and warping is inverse (each output pixel looks up its source position).

A placement ``t = (t_r, t_x, t_y)`` scales the foreground canvas to
``(t_r W, t_r H)`` and puts its top-left corner at
``(t_x (W - w), t_y (H - h))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import F, Tensor, as_tensor

EPS = 1e-4


class EmptyMask(ValueError):
    """No pixel of the mask reaches the threshold."""


@dataclass(frozen=True)
class TransformParams:
    t_r: float
    t_x: float
    t_y: float

    def __post_init__(self):
        for f in ("t_r", "t_x", "t_y"):
            object.__setattr__(self, f, float(np.clip(getattr(self, f), EPS, 1.0 - EPS)))

    @classmethod
    def from_array(cls, a) -> "TransformParams":
        a = np.asarray(a, dtype=np.float64).reshape(3)
        return cls(a[0], a[1], a[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.t_r, self.t_x, self.t_y])

    def scaled_size(self, W: int, H: int) -> tuple[float, float]:
        return self.t_r * W, self.t_r * H

    def top_left(self, W: int, H: int) -> tuple[float, float]:
        w, h = self.scaled_size(W, H)
        return self.t_x * (W - w), self.t_y * (H - h)


@dataclass(frozen=True)
class BBox:
    x: int
    y: int
    w: int
    h: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x, self.y, self.w, self.h


_A = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
_BX = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
_BY = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def theta_from_params(t):
    """Affine matrix for placement ``t``.

    ``TransformParams`` (or a plain length-3 array) gives a 2x3 numpy array.
    A :class:`Tensor` of shape ``(B, 3)`` gives a differentiable ``(B, 2, 3)``
    Tensor.
    """
    if isinstance(t, Tensor):
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValueError(f"expected t of shape (B, 3), got {t.shape}")
        # same clamp as TransformParams; keeps 1/t_r finite if tanh saturates
        t = F.clamp(t, EPS, 1.0 - EPS)
        tr, tx, ty = t[:, 0:1], t[:, 1:2], t[:, 2:3]
        inv = 1.0 / tr
        shift_x = (1.0 - 2.0 * tx) * (inv - 1.0)
        shift_y = (1.0 - 2.0 * ty) * (inv - 1.0)
        col = lambda v: F.reshape(v, (-1, 1, 1))  # noqa: E731
        return col(inv) * _A + col(shift_x) * _BX + col(shift_y) * _BY
    p = t if isinstance(t, TransformParams) else TransformParams.from_array(t)
    inv = 1.0 / p.t_r
    return np.array(
        [
            [inv, 0.0, (1.0 - 2.0 * p.t_x) * (inv - 1.0)],
            [0.0, inv, (1.0 - 2.0 * p.t_y) * (inv - 1.0)],
        ]
    )


def params_from_theta(theta: np.ndarray) -> TransformParams:
    theta = np.asarray(theta)
    s = theta[0, 0]
    if s == 1.0:
        return TransformParams(1.0, 0.5, 0.5)
    return TransformParams(
        1.0 / s,
        (1.0 - theta[0, 2] / (s - 1.0)) / 2.0,
        (1.0 - theta[1, 2] / (s - 1.0)) / 2.0,
    )


def _batched(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return F.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C, H, W) or (B, C, H, W), got {x.shape}")


def _t_tensor(t, B: int) -> Tensor:
    if isinstance(t, Tensor):
        return t if t.ndim == 2 else F.reshape(t, (1, 3))
    if isinstance(t, TransformParams):
        arr = t.as_array()[None]
    else:
        arr = np.clip(np.asarray(t, dtype=np.float64).reshape(-1, 3), EPS, 1 - EPS)
    if arr.shape[0] == 1 and B > 1:
        arr = np.repeat(arr, B, axis=0)
    return Tensor(arr)


def affine_sample(src, theta) -> Tensor:
    """Bilinear inverse warp with zero padding; output size equals input."""
    src_b, squeeze = _batched(src)
    th = as_tensor(theta)
    if th.ndim == 2:
        th = F.reshape(th, (1, 2, 3))
    if th.shape[0] == 1 and src_b.shape[0] > 1:
        th = F.concat([th] * src_b.shape[0], axis=0)
    out = F.grid_sample_bilinear(src_b, th)
    return F.reshape(out, out.shape[1:]) if squeeze else out


def composite(bg, fg, mask, t) -> tuple[Tensor, Tensor]:
    """Paste ``fg`` (through ``mask``) over ``bg`` at placement ``t``.

    Returns ``(I_c, M_c)`` where ``M_c`` is the warped mask and
    ``I_c = M_c * warp(fg) + (1 - M_c) * bg``. Differentiable in every input,
    including ``t`` when it is a Tensor.
    """
    bg_b, squeeze = _batched(bg)
    fg_b, _ = _batched(fg)
    m_b, _ = _batched(mask)
    if m_b.shape[1] != 1:
        raise ValueError(f"mask must have one channel, got {m_b.shape}")
    if not (bg_b.shape[2:] == fg_b.shape[2:] == m_b.shape[2:]):
        raise ValueError(f"misaligned inputs {bg_b.shape} {fg_b.shape} {m_b.shape}")
    B = bg_b.shape[0]
    theta = theta_from_params(_t_tensor(t, B))
    C = fg_b.shape[1]
    # warp image and mask together in one sampler call
    warped = F.grid_sample_bilinear(F.concat([fg_b, m_b], axis=1), theta)
    fg_w = warped[:, :C]
    m_c = warped[:, C:]
    i_c = m_c * fg_w + (1.0 - m_c) * bg_b
    if squeeze:
        return F.reshape(i_c, i_c.shape[1:]), F.reshape(m_c, m_c.shape[1:])
    return i_c, m_c


def bbox_from_mask(mask, threshold: float = 0.5) -> BBox:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.reshape(m.shape[-2:]) if m.ndim > 2 else m
    on = m >= threshold
    rows = np.flatnonzero(on.any(axis=1))
    cols = np.flatnonzero(on.any(axis=0))
    if rows.size == 0:
        raise EmptyMask(f"no mask pixel >= {threshold}")
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def tgt_from_bbox(b: BBox, W: int, H: int) -> TransformParams:
    """Ground-truth placement from a bounding box; an axis the box fills
    completely gets relative position 0.5."""
    t_r = max(b.w / W, b.h / H)
    t_x = b.x / (W - b.w) if b.w < W else 0.5
    t_y = b.y / (H - b.h) if b.h < H else 0.5
    return TransformParams(t_r, t_x, t_y)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a (C, H, W) array, edge-clamped."""
    C, H, W = img.shape

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(H, out_h)
    x0, x1, wx = axis(W, out_w)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy)[None, :, None] + bot * wy[None, :, None]


def preprocess_pair(fg_raw, mask_raw, bg_raw, side: int = 256):
    """Bring a raw foreground/mask and background to ``side x side``.

    The foreground keeps its aspect ratio relative to the background: it is
    resized so the longer relative side spans the canvas, then zero-padded
    evenly on the other axis. The background is resized directly.
    Returns ``(fg, mask, bg)``.
    """
    fg_raw = np.asarray(fg_raw, dtype=np.float64)
    mask_raw = np.asarray(mask_raw, dtype=np.float64)
    bg_raw = np.asarray(bg_raw, dtype=np.float64)
    if min(fg_raw.size, bg_raw.size, mask_raw.size) == 0:
        raise ValueError("empty input image")
    if mask_raw.ndim == 2:
        mask_raw = mask_raw[None]
    _, fh, fw = fg_raw.shape
    _, bh, bw = bg_raw.shape
    if fw / fh > bw / bh:
        new_w, new_h = side, int(round(side * fh * bw / (fw * bh)))
    else:
        new_w, new_h = int(round(side * fw * bh / (fh * bw))), side
    new_w, new_h = max(new_w, 1), max(new_h, 1)
    top = (side - new_h) // 2
    left = (side - new_w) // 2

    def place(img):
        canvas = np.zeros((img.shape[0], side, side))
        canvas[:, top : top + new_h, left : left + new_w] = resize_bilinear(img, new_h, new_w)
        return canvas

    return place(fg_raw), place(mask_raw), resize_bilinear(bg_raw, side, side)
