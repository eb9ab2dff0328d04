"""PNG and placement-record files.

Images are 8-bit PNGs mapped to ``(C, H, W)`` float arrays in [0, 1]; masks
are single-channel PNGs. A placement record is one line of text holding
``t_r t_x t_y`` as decimals.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import TransformParams


def read_png(path: str | Path, mode: str | None = None) -> np.ndarray:
    """Read a PNG as ``(C, H, W)`` floats in [0, 1].

    ``mode`` may force ``"RGB"`` or ``"L"`` (single channel).
    """
    with Image.open(path) as im:
        if mode is not None:
            im = im.convert(mode)
        elif im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        a = np.asarray(im, dtype=np.float64) / 255.0
    if a.ndim == 2:
        a = a[None]
    else:
        a = a.transpose(2, 0, 1)
    return np.ascontiguousarray(a)


def read_mask(path: str | Path) -> np.ndarray:
    return read_png(path, mode="L")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str | Path, img) -> None:
    """Write a ``(C, H, W)`` array (C = 1 or 3) in [0, 1] as an 8-bit PNG."""
    a = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.shape[0] == 1:
        Image.fromarray(to_uint8(a[0]), mode="L").save(path)
    elif a.shape[0] == 3:
        Image.fromarray(to_uint8(a.transpose(1, 2, 0)), mode="RGB").save(path)
    else:
        raise ValueError(f"cannot write {a.shape[0]}-channel image")


def write_params_record(path: str | Path, t: TransformParams) -> None:
    Path(path).write_text(f"{t.t_r:.12f} {t.t_x:.12f} {t.t_y:.12f}\n")


def read_params_record(path: str | Path) -> TransformParams:
    fields = Path(path).read_text().split()
    if len(fields) != 3:
        raise ValueError(f"{path}: expected 3 fields, found {len(fields)}")
    return TransformParams(*(float(f) for f in fields))
