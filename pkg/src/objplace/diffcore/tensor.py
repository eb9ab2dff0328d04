"""Reverse-mode autodiff tensor over float64 numpy arrays.

Each differentiable op records its parents and a closure mapping the
output gradient to one gradient per parent. ``Tensor.backward`` walks the
graph in reverse topological order. Only leaves (tensors with
``requires_grad`` and no parents) accumulate into ``.grad``; intermediate
gradients live in a scratch dict for the duration of one call, so running
``backward`` twice on the same graph doubles leaf gradients exactly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import kernels


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible for an op."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # --- autodiff ----------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeMismatch(f"seed gradient {grad.shape} does not match {self.shape}")
        if not self.requires_grad:
            return
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # --- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (g * inside,))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(as_tensor(a).data)


# --- reductions / shape ------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        z = np.zeros(a.shape)
        np.add.at(z, idx, g)
        return (z,)

    return _make(a.data[idx], (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0]
    ax = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeMismatch(f"concat on axis {axis}: {[t.shape for t in ts]}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=ax)),
    )


# --- linear algebra ------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in_features, out_features)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {w.shape}")
    y = matmul(x, w) if x.ndim >= 2 else matmul(reshape(x, (1, -1)), w).reshape(-1)
    return y if b is None else add(y, b)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(
        out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    )


# --- convolution / pooling ---------------------------------------------------
def conv2d(x, w, b=None, stride: int = 1, pad: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW input, weight (Co, Ci, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {w.shape}")
    B, Ci, H, W = x.shape
    Co, _, k, _ = w.shape
    xd = np.ascontiguousarray(x.data)
    cols = kernels.im2col(xd, k, stride, pad)  # (B, Ci*k*k, Ho, Wo)
    Ho, Wo = cols.shape[2], cols.shape[3]
    cmat = cols.reshape(B, Ci * k * k, Ho * Wo)
    wmat = w.data.reshape(Co, -1)
    out = np.matmul(wmat, cmat).reshape(B, Co, Ho, Wo)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data.reshape(1, Co, 1, 1)
        parents.append(b)

    def backward(g):
        gm = np.ascontiguousarray(g).reshape(B, Co, Ho * Wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm).reshape(B, Ci * k * k, Ho, Wo)
            gx = kernels.col2im(gcols, x.shape, k, stride, pad)
        if w.requires_grad:
            gw = np.matmul(gm, cmat.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=(0, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _make(out, parents, backward)


def conv3x3(x, w, b=None, stride: int = 1, pad: int = 1) -> Tensor:
    if as_tensor(w).shape[-1] != 3:
        raise ShapeMismatch(f"conv3x3 expects a 3x3 kernel, got {as_tensor(w).shape}")
    return conv2d(x, w, b, stride, pad)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 (H and W must be even)."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeMismatch(f"max_pool2d needs even spatial dims, got {x.shape}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        B, C, H // 2, W // 2, 4
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(B, C, H, W),)

    return _make(out, (x,), backward)


def avg_pool2d(x: Tensor) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeMismatch(f"avg_pool2d needs even spatial dims, got {x.shape}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), backward)


def _adaptive_bins(size: int, n: int) -> list[tuple[int, int]]:
    return [((i * size) // n, -(-((i + 1) * size) // n)) for i in range(n)]


def adaptive_avg_pool2d(x: Tensor, n: int) -> Tensor:
    """Average-pool to an n x n grid using the usual floor/ceil bin edges."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % n == 0 and W % n == 0:
        sh, sw = H // n, W // n
        out = x.data.reshape(B, C, n, sh, n, sw).mean(axis=(3, 5))

        def backward(g):
            return (np.repeat(np.repeat(g, sh, axis=2), sw, axis=3) / (sh * sw),)

        return _make(out, (x,), backward)

    rows, cols = _adaptive_bins(H, n), _adaptive_bins(W, n)
    out = np.empty((B, C, n, n))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros(x.shape)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += g[:, :, i, j][..., None, None] / ((r1 - r0) * (c1 - c0))
        return (gx,)

    return _make(out, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over all axes except axis 1.

    In training mode the running buffers are updated in place (unbiased
    variance, exponential average with ``momentum``).
    """
    x = as_tensor(x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch(f"batch_norm: {C} channels vs gamma {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    if training:
        n = x.data.size // C
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        unbiased = var.reshape(C) * (n / (n - 1) if n > 1 else 1.0)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv
    out = g_ * xhat + b_

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g_
            if training:
                m = x.data.size // C
                gx = (inv / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward)


# --- spatial transformer ---------------------------------------------------------
def _pixel_offsets(H: int, W: int):
    # pixel i has normalised centre (2i+1)/W - 1; (W/2) * that = i - (W-1)/2, exact in f64
    u = np.arange(W, dtype=np.float64) - (W - 1) / 2.0
    v = np.arange(H, dtype=np.float64) - (H - 1) / 2.0
    return u[None, :], v[:, None]


def sample_coords(theta: np.ndarray, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Source pixel coordinates for every output pixel under ``theta`` (B, 2, 3)."""
    u, v = _pixel_offsets(H, W)
    t = theta[:, :, :, None, None]
    ix = t[:, 0, 0] * u + t[:, 0, 1] * (W / H) * v + t[:, 0, 2] * (W / 2.0) + (W - 1) / 2.0
    iy = t[:, 1, 0] * (H / W) * u + t[:, 1, 1] * v + t[:, 1, 2] * (H / 2.0) + (H - 1) / 2.0
    shape = (theta.shape[0], H, W)
    return (
        np.ascontiguousarray(np.broadcast_to(ix, shape)),
        np.ascontiguousarray(np.broadcast_to(iy, shape)),
    )


def grid_sample_bilinear(src, theta) -> Tensor:
    """Inverse-warp ``src`` (B, C, H, W) through ``theta`` (B, 2, 3).

    Output pixel centres are mapped, in normalised [-1, 1] coordinates with
    x rightward and y downward, through ``theta`` to source positions that
    are read with bilinear interpolation; anything outside the source reads
    as zero. Output size equals input size.
    """
    src, theta = as_tensor(src), as_tensor(theta)
    if src.ndim != 4 or theta.shape != (src.shape[0], 2, 3):
        raise ShapeMismatch(f"grid_sample_bilinear: src {src.shape}, theta {theta.shape}")
    B, C, H, W = src.shape
    sd = np.ascontiguousarray(src.data)
    ix, iy = sample_coords(theta.data, H, W)
    out = kernels.grid_sample_forward(sd, ix, iy)

    def backward(g):
        gsrc, gix, giy = kernels.grid_sample_backward(sd, ix, iy, np.ascontiguousarray(g))
        gtheta = None
        if theta.requires_grad:
            u, v = _pixel_offsets(H, W)
            gtheta = np.empty((B, 2, 3))
            gtheta[:, 0, 0] = (gix * u).sum(axis=(1, 2))
            gtheta[:, 0, 1] = (gix * v).sum(axis=(1, 2)) * (W / H)
            gtheta[:, 0, 2] = gix.sum(axis=(1, 2)) * (W / 2.0)
            gtheta[:, 1, 0] = (giy * u).sum(axis=(1, 2)) * (H / W)
            gtheta[:, 1, 1] = (giy * v).sum(axis=(1, 2))
            gtheta[:, 1, 2] = giy.sum(axis=(1, 2)) * (H / 2.0)
        return (gsrc if src.requires_grad else None), gtheta

    return _make(out, (src, theta), backward)
