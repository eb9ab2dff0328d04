"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
reference implementation is used. Set ``OBJPLACE_PURE_PYTHON=1`` to force
the fallback (useful for benchmarking and for cross-checking the backends).

On glibc, large freed blocks are normally returned to the OS, so every
training step page-faults its multi-megabyte temporaries back in. Raising
the mmap and trim thresholds keeps them in the heap; set
``OBJPLACE_DEFAULT_MALLOC=1`` to leave the allocator alone.
"""

from __future__ import annotations

import ctypes
import os
import sys

from . import _kernels_py


def _keep_freed_memory() -> bool:
    if not sys.platform.startswith("linux") or os.environ.get("OBJPLACE_DEFAULT_MALLOC"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
    return bool(libc.mallopt(M_MMAP_THRESHOLD, 1 << 30) and libc.mallopt(M_TRIM_THRESHOLD, 1 << 30))


ALLOCATOR_TUNED = _keep_freed_memory()

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("OBJPLACE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on build
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def use_backend(name: str) -> None:
    """Switch the active backend at runtime ("compiled" or "python")."""
    global _impl, BACKEND
    if name == "python":
        _impl = _kernels_py
    elif name == "compiled":
        from . import _ckernels as _compiled  # type: ignore[attr-defined]

        _impl = _compiled
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def compiled_available() -> bool:
    try:
        from . import _ckernels  # noqa: F401  # type: ignore[attr-defined]
    except ImportError:
        return False
    return True


def grid_sample_forward(src, ix, iy):
    return _impl.grid_sample_forward(src, ix, iy)


def grid_sample_backward(src, ix, iy, gout):
    return _impl.grid_sample_backward(src, ix, iy, gout)


def im2col(x, k, stride, pad):
    return _impl.im2col(x, k, stride, pad)


def col2im(cols, shape, k, stride, pad):
    return _impl.col2im(cols, tuple(shape), k, stride, pad)
