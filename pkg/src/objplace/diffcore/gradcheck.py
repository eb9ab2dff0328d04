"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradcheckReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    n_checked: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.worst <= tol

    def __str__(self) -> str:
        rows = [f"{k}: {v:.3e} ({self.n_checked[k]} coords)" for k, v in self.max_rel_err.items()]
        return "; ".join(rows)


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def gradcheck(
    f: Callable[..., Tensor],
    point: Sequence[np.ndarray],
    step: float = 1e-5,
    names: Sequence[str] | None = None,
    max_coords: int = 60,
    seed: int = 0,
) -> GradcheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` takes one Tensor per entry of ``point`` and returns a Tensor. A
    non-scalar output is reduced to a scalar by a fixed random projection.
    At most ``max_coords`` coordinates per input are probed (chosen with a
    seeded generator); the report holds the worst relative error per input.
    """
    # distinct stream so the projection never coincides with caller draws
    rs = np.random.default_rng([seed, 0x6AC4])
    point = [np.array(p, dtype=np.float64) for p in point]
    names = list(names) if names is not None else [f"x{i}" for i in range(len(point))]

    probe = f(*[Tensor(p) for p in point])
    proj = rs.standard_normal(probe.shape) if probe.size != 1 else np.ones(probe.shape)

    def scalar(*arrays) -> float:
        return float((f(*[Tensor(a) for a in arrays]).data * proj).sum())

    inputs = [Tensor(p.copy(), requires_grad=True) for p in point]
    out = f(*inputs)
    out.backward(proj)

    report = GradcheckReport()
    for i, (name, p) in enumerate(zip(names, point)):
        analytic = inputs[i].grad if inputs[i].grad is not None else np.zeros_like(p)
        n = p.size
        coords = np.arange(n) if n <= max_coords else rs.choice(n, max_coords, replace=False)
        errs = []
        for c in coords:
            plus = [a.copy() for a in point]
            minus = [a.copy() for a in point]
            plus[i].flat[c] += step
            minus[i].flat[c] -= step
            numeric = (scalar(*plus) - scalar(*minus)) / (2 * step)
            errs.append(float(rel_err(analytic.flat[c], numeric)))
        report.max_rel_err[name] = max(errs) if errs else 0.0
        report.n_checked[name] = len(errs)
    return report


def gradcheck_params(
    loss: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    step: float = 1e-5,
    max_coords: int = 12,
    seed: int = 0,
) -> GradcheckReport:
    """Gradcheck a scalar ``loss()`` with respect to parameter tensors that
    the closure reads in place. Each probed coordinate is perturbed in
    ``param.data`` and restored afterwards."""
    rs = np.random.default_rng([seed, 0x6AC5])
    for _, p in params:
        p.grad = None
    out = loss()
    if out.size != 1:
        raise ValueError("gradcheck_params needs a scalar loss")
    out.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params}
    report = GradcheckReport()
    for name, p in params:
        n = p.size
        coords = np.arange(n) if n <= max_coords else rs.choice(n, max_coords, replace=False)
        errs = []
        for c in coords:
            orig = p.data.flat[c]
            p.data.flat[c] = orig + step
            fp = loss().item()
            p.data.flat[c] = orig - step
            fm = loss().item()
            p.data.flat[c] = orig
            errs.append(float(rel_err(analytic[name].flat[c], (fp - fm) / (2 * step))))
        report.max_rel_err[name] = max(errs) if errs else 0.0
        report.n_checked[name] = len(errs)
    for _, p in params:
        p.grad = None
    return report
