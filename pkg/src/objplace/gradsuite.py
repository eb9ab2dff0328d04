"""Finite-difference gradient suite over every differentiable building block.

Points are drawn away from kinks (ReLU at 0, max-pool ties, |x| at 0,
clamp bounds, bilinear cell edges) so central differences are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffcore import F, Rng, gradcheck
from .diffcore.gradcheck import GradcheckReport
from .gcm import CrossAttention, Regressor

TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    report: GradcheckReport

    @property
    def worst(self) -> float:
        return self.report.worst

    def ok(self, tol: float = TOL) -> bool:
        return self.report.ok(tol)


def _away(x: np.ndarray, gap: float = 0.05) -> np.ndarray:
    """Push values at least ``gap`` away from 0."""
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def _cases(rng: Rng) -> list[tuple[str, Callable, list]]:
    r = lambda key, *shape: rng.child(key).normal(size=shape)
    u = lambda key, lo, hi, *shape: rng.child(key).uniform(lo, hi, size=shape)
    pos = u("pos", 0.5, 2.0, 3, 4)
    distinct = rng.child("mp").permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.1
    bn_x = r("bnx", 4, 3, 3, 3)
    theta = np.array([[[0.8, 0.1, 0.03], [-0.05, 0.9, -0.02]]]) + 0.01 * r("th", 1, 2, 3)

    cases = [
        ("add", F.add, [r("a", 3, 4), r("b", 3, 4)]),
        ("sub", F.sub, [r("a", 3, 4), r("b", 1, 4)]),
        ("mul", F.mul, [r("a", 3, 4), r("b", 3, 4)]),
        ("div", F.div, [r("a", 3, 4), pos]),
        ("power", lambda x: F.power(x, 3.0), [r("a", 3, 4)]),
        ("exp", F.exp, [r("a", 3, 4)]),
        ("log", F.log, [pos]),
        ("relu", F.relu, [_away(r("a", 3, 4))]),
        ("leaky_relu", lambda x: F.leaky_relu(x, 0.2), [_away(r("a", 3, 4))]),
        ("tanh", F.tanh, [r("a", 3, 4)]),
        ("sigmoid", F.sigmoid, [r("a", 3, 4)]),
        ("abs", F.absolute, [_away(r("a", 3, 4))]),
        ("clamp", lambda x: F.clamp(x, -0.5, 0.5), [np.array([-1.0, -0.3, 0.1, 0.4, 0.9])]),
        ("sum", lambda x: F.tsum(x, axis=1), [r("a", 3, 4)]),
        ("mean", lambda x: F.mean(x, axis=(0, 2)), [r("a", 2, 3, 4)]),
        ("reshape_transpose", lambda x: F.transpose(F.reshape(x, (4, 3)), (1, 0)), [r("a", 3, 4)]),
        ("getitem", lambda x: x[1:, ::2], [r("a", 3, 4)]),
        ("concat", lambda a, b: F.concat([a, b], axis=1), [r("a", 2, 3), r("b", 2, 2)]),
        ("matmul", F.matmul, [r("a", 2, 3, 4), r("b", 2, 4, 5)]),
        ("linear", F.linear, [r("x", 3, 4), r("w", 4, 5), r("bias", 5)]),
        ("softmax", lambda x: F.softmax(x, axis=-1), [r("a", 3, 5)]),
        ("conv3x3", lambda x, w, b: F.conv2d(x, w, b, 1, 1), [r("x", 2, 3, 5, 5), r("w", 4, 3, 3, 3), r("bias", 4)]),
        ("conv3x3_stride2", lambda x, w: F.conv2d(x, w, None, 2, 1), [r("x", 1, 2, 6, 6), r("w", 3, 2, 3, 3)]),
        ("conv4x4_stride2", lambda x, w: F.conv2d(x, w, None, 2, 1), [r("x", 1, 2, 8, 8), r("w", 3, 2, 4, 4)]),
        ("max_pool2d", F.max_pool2d, [distinct]),
        ("avg_pool2d", F.avg_pool2d, [r("a", 2, 3, 4, 4)]),
        ("adaptive_avg_pool2d", lambda x: F.adaptive_avg_pool2d(x, 3), [r("a", 1, 2, 8, 8)]),
        (
            "batch_norm",
            lambda x, g, b: F.batch_norm(x, g, b, np.zeros(3), np.ones(3), True),
            [bn_x, u("g", 0.5, 1.5, 3), r("beta", 3)],
        ),
        ("grid_sample", F.grid_sample_bilinear, [u("src", 0, 1, 1, 2, 7, 7), theta]),
    ]

    att = CrossAttention(rng.child("att"), 16, 8, 5)
    att_w = r("attw", 2, 16)

    def attention(f_fg, f_bg, pk, pv):
        # route the encodings through the graph so their gradients are checked
        att.p_k, att.p_v = pk, pv
        x, alpha = att(f_fg, f_bg)
        return F.tsum(x * att_w) + F.tsum(alpha * 0.3)

    cases.append(
        (
            "cross_attention",
            attention,
            [r("ffg", 2, 1, 16), r("fbg", 2, 5, 16), att.p_k.data.copy() * 10, att.p_v.data.copy() * 10],
        )
    )
    reg = Regressor(rng.child("reg"), 8, 4, 12)
    cases.append(("regressor", lambda x, z: reg(x, z), [r("xa", 3, 8), r("z", 3, 4)]))

    from .dualpath import LatentDistribution, gan_value, generator_loss, loss_kld, loss_rec

    t_s, t_gt = u("ts", 0.1, 0.9, 4, 3), u("tgt", 0.1, 0.9, 4, 3)
    cases += [
        ("loss_kld", lambda m, lv: loss_kld(LatentDistribution(m, lv)), [r("mu", 2, 6), 0.5 * r("lv", 2, 6)]),
        ("loss_rec_l2_uniform", lambda t: loss_rec(t, t_gt, "l2_uniform"), [t_s]),
        ("loss_rec_l1_uniform", lambda t: loss_rec(t, t_gt, "l1_uniform"), [t_s]),
        # the dynamic weights are detached, so hold them at the base point
        ("loss_rec_l2_linear", lambda t: loss_rec(t, t_gt, "l2_linear", weight_at=t_s[:, 0]), [t_s]),
        ("loss_rec_l2_trig", lambda t: loss_rec(t, t_gt, "l2_trig", weight_at=t_s[:, 0]), [t_s]),
        ("loss_adv_d", gan_value, [u("pr", 0.1, 0.9, 5), u("pf", 0.1, 0.9, 5)]),
        ("loss_adv_g", lambda p: generator_loss(p), [u("pf", 0.1, 0.9, 5)]),
        ("loss_adv_g_saturating", lambda p: generator_loss(p, True), [u("pf", 0.1, 0.9, 5)]),
    ]
    return cases


def run_suite(seed: int = 0, step: float = 1e-5) -> list[SuiteResult]:
    out = []
    for name, fn, point in _cases(Rng(seed).child("gradsuite")):
        out.append(SuiteResult(name, gradcheck(fn, point, step=step)))
    return out
