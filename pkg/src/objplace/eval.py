"""Placement accuracy, Frechet distance on a fixed random embedder, and
parameter-space diversity."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .diffcore import Conv2d, Module, Rng, no_grad
from .diffcore import F
from .geometry import TransformParams, composite
from .synthdata import oracle

SHRINKAGE = 1e-6
EIG_FLOOR = 1e-10
EMBED_SEED = 0x0F1D


class DegenerateCovariance(ValueError):
    pass


@dataclass
class MetricReport:
    accuracy: float
    frechet: float
    diversity: float
    n_samples: int
    k_per_sample: int

    @staticmethod
    def header() -> str:
        return ",".join(f.name for f in fields(MetricReport))

    def csv_row(self) -> str:
        return ",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in asdict(self).values())


# --- accuracy ----------------------------------------------------------------
def accuracy(placements: np.ndarray, specs, masks) -> float:
    """Fraction of placements (S, k, 3) the oracle accepts for their scene."""
    placements = np.asarray(placements, dtype=np.float64)
    if placements.ndim == 2:
        placements = placements[:, None, :]
    hits = total = 0
    for spec, mask, ts in zip(specs, masks, placements):
        for t in ts:
            hits += oracle(spec, TransformParams(*t), mask)
            total += 1
    return hits / total if total else 0.0


def model_placements(model, split, rng: Rng, k: int = 10, chunk: int = 32) -> np.ndarray:
    from .dualpath import sample_placements

    out = []
    for start in range(0, len(split.specs), chunk):
        sl = slice(start, start + chunk)
        out.append(sample_placements(model, split.bg[sl], split.fg[sl], split.mask[sl], rng.child(start), k))
    return np.concatenate(out) if out else np.zeros((0, k, 3))


def placement_accuracy(model, split, rng: Rng, k: int = 1) -> float:
    return accuracy(model_placements(model, split, rng, k), split.specs, split.mask)


# --- diversity ---------------------------------------------------------------
def diversity(placements: np.ndarray) -> float:
    """Mean over scenes of the mean pairwise L2 distance between the k
    placements drawn for that scene."""
    p = np.asarray(placements, dtype=np.float64)
    S, k, _ = p.shape
    if k < 2 or S == 0:
        return 0.0
    d = np.linalg.norm(p[:, :, None, :] - p[:, None, :, :], axis=-1)
    iu = np.triu_indices(k, 1)
    return float(d[:, iu[0], iu[1]].mean())


# --- Frechet distance --------------------------------------------------------
def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2 or not np.all(np.isfinite(x)):
        raise DegenerateCovariance(f"need at least 2 finite feature vectors, got {x.shape[0]}")
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False)) + SHRINKAGE * np.eye(x.shape[1])
    if np.linalg.eigvalsh(cov).min() < -EIG_FLOOR:
        raise DegenerateCovariance("covariance is not positive semidefinite after shrinkage")
    return mu, cov


def frechet_distance(feats_a, feats_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    mu_a, s_a = _moments(feats_a)
    mu_b, s_b = _moments(feats_b)
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"feature dims differ: {mu_a.shape} vs {mu_b.shape}")
    ra = _sqrt_psd(s_a)
    m = ra @ s_b @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    w = np.where(w < EIG_FLOOR, np.maximum(w, 0.0), w)
    tr_sqrt = np.sqrt(w).sum()
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(s_a) + np.trace(s_b) - 2.0 * tr_sqrt, 0.0))


class Embedder(Module):
    """Untrained, seeded conv net: three conv+ReLU+pool stages to 64 dims."""

    def __init__(self, seed: int = EMBED_SEED, widths=(16, 32, 64)):
        rng = Rng(seed)
        prev = 4
        self.convs = []
        for i, w in enumerate(widths):
            self.convs.append(Conv2d(rng.child(i), prev, w))
            prev = w

    def __call__(self, image, mask) -> np.ndarray:
        with no_grad():
            x = F.concat([F.as_tensor(image), F.as_tensor(mask)], axis=1)
            for c in self.convs:
                x = F.avg_pool2d(F.relu(c(x)))
            return F.mean(x, axis=(2, 3)).data


def embed(images: np.ndarray, masks: np.ndarray, chunk: int = 64) -> np.ndarray:
    e = Embedder()
    return np.concatenate([e(images[i : i + chunk], masks[i : i + chunk]) for i in range(0, len(images), chunk)])


# --- full report -------------------------------------------------------------
def evaluate(model, split, rng: Rng, k: int = 10) -> MetricReport:
    """Accuracy and diversity over k path-u draws per test scene; Frechet
    distance between the first draw's composites and the split's positives."""
    ts = model_placements(model, split, rng, k)
    acc = accuracy(ts, split.specs, split.mask)
    div = diversity(ts)
    with no_grad():
        ic, mc = composite(split.bg, split.fg, split.mask, ts[:, 0, :])
    pos = split.positives()
    fd = frechet_distance(embed(ic.data, mc.data), embed(split.comp[pos], split.comp_mask[pos]))
    return MetricReport(acc, fd, div, len(split.specs), k)
