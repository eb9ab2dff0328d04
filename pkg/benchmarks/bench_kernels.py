"""Compiled vs pure-Python kernels, plus the matmul share of a conv layer.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from objplace import _kernels_py, kernels
from objplace.diffcore import F, Tensor


def best(fn, repeat: int) -> float:
    fn()  # warm the allocator
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rs: np.random.Generator):
    B, C, H, W = 16, 4, 64, 64
    src = rs.random((B, C, H, W))
    ix = rs.uniform(-2, W + 1, (B, H, W))
    iy = rs.uniform(-2, H + 1, (B, H, W))
    gout = rs.standard_normal((B, C, H, W))
    x = rs.standard_normal((16, 32, 32, 32))
    cols = rs.standard_normal((16, 32 * 9, 32, 32))
    return [
        ("grid_sample fwd 16x4x64x64", lambda m: m.grid_sample_forward(src, ix, iy)),
        ("grid_sample bwd 16x4x64x64", lambda m: m.grid_sample_backward(src, ix, iy, gout)),
        ("im2col 16x32x32x32 k3", lambda m: m.im2col(x, 3, 1, 1)),
        ("col2im 16x32x32x32 k3", lambda m: m.col2im(cols, x.shape, 3, 1, 1)),
    ]


def conv_breakdown(rs: np.random.Generator, repeat: int) -> tuple[float, float]:
    """Full conv forward+backward time and the time of its three matmuls."""
    x = Tensor(rs.standard_normal((16, 32, 32, 32)), requires_grad=True)
    w = Tensor(rs.standard_normal((64, 32, 3, 3)) * 0.1, requires_grad=True)

    def full():
        out = F.conv2d(x, w, None, 1, 1)
        out.backward(np.ones(out.shape))

    cmat = kernels.im2col(x.data, 3, 1, 1).reshape(16, 288, 1024)
    wmat = w.data.reshape(64, 288)
    gm = np.ones((16, 64, 1024))

    def mm():
        np.matmul(wmat, cmat)
        np.matmul(wmat.T, gm)
        np.matmul(gm, cmat.transpose(0, 2, 1)).sum(axis=0)

    return best(full, repeat), best(mm, repeat)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rs = np.random.default_rng(0)
    if not kernels.compiled_available():
        print("compiled extension not built; only the Python backend is available")
    from objplace import _ckernels as compiled  # noqa: E402

    print(f"{'kernel':32s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in kernel_cases(rs):
        tp = best(lambda: fn(_kernels_py), args.repeat)
        tc = best(lambda: fn(compiled), args.repeat)
        print(f"{name:32s} {tp * 1e3:10.2f} {tc * 1e3:12.2f} {tp / tc:8.1f}x")
    full, mm = conv_breakdown(rs, args.repeat)
    print(f"\nconv3x3 32->64 on 16x32x32 fwd+bwd: {full * 1e3:.1f} ms, of which matmul {mm * 1e3:.1f} ms "
          f"({100 * mm / full:.0f}%) on backend {kernels.BACKEND}")


if __name__ == "__main__":
    main()
