"""Graph completion generator core.

The background is turned into a set of grid nodes at several scales, the
foreground into a single node; multi-head cross-attention with learned
per-node placement encodings lets the foreground node query the background,
and a small MLP maps the attention output plus a latent vector to a
placement ``t`` in (0, 1)^3.

Node order: scales in the configured order, row-major inside each scale.
Reported node indices are 1-based.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .diffcore import F, Module, Rng, ShapeMismatch, Tensor, as_tensor, param
from .diffcore.nn import ConvBNReLU, Linear


class InvalidGrid(ValueError):
    """A node grid is finer than the feature map it divides."""


@dataclass(frozen=True)
class GCMConfig:
    side: int = 64
    backbone_widths: tuple[int, ...] = (16, 32, 64, 64)
    pool_depth: int = 4
    C: int = 128
    C_z: int = 256
    n_bg: tuple[int, ...] = (2, 4, 8)
    n_fg: tuple[int, ...] = (1,)
    heads: int = 8
    reg_hidden: int = 256
    use_pk: bool = True
    use_pv: bool = True
    share_encodings: bool = False

    def __post_init__(self):
        if self.C % self.heads:
            raise ValueError(f"C={self.C} not divisible by {self.heads} heads")
        if not 0 <= self.pool_depth <= len(self.backbone_widths):
            raise ValueError("pool_depth must lie in [0, number of backbone blocks]")
        object.__setattr__(self, "backbone_widths", tuple(self.backbone_widths))
        object.__setattr__(self, "n_bg", tuple(self.n_bg))
        object.__setattr__(self, "n_fg", tuple(self.n_fg))

    @property
    def feature_side(self) -> int:
        return self.side >> self.pool_depth

    @property
    def n_nodes(self) -> int:
        return sum(n * n for n in self.n_bg)

    @property
    def head_dim(self) -> int:
        return self.C // self.heads

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GCMConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# pool_depth 3 keeps an 8x8 map at side 64 so the finest 8x8 grid is valid
DESK = GCMConfig(pool_depth=3)
# full-size hyperparameters (C=512, C_z=1024, Fc1024) on a from-scratch encoder
PAPER = GCMConfig(
    side=256,
    backbone_widths=(64, 128, 256, 512),
    pool_depth=4,
    C=512,
    C_z=1024,
    reg_hidden=1024,
)
TINY = GCMConfig(side=16, backbone_widths=(4, 8), pool_depth=1, C=16, C_z=8, n_bg=(2,), reg_hidden=16)
PRESETS = {"desk": DESK, "paper": PAPER, "tiny": TINY}


def preset(name: str, **overrides) -> GCMConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


class Backbone(Module):
    """Conv3x3-BN-ReLU blocks over image+mask; the first ``pool_depth``
    blocks are followed by 2x2 max pooling."""

    def __init__(self, rng: Rng, widths: tuple[int, ...], pool_depth: int, in_ch: int = 4):
        self.blocks = []
        prev = in_ch
        for i, w in enumerate(widths):
            self.blocks.append(ConvBNReLU(rng.child(f"block{i}"), prev, w))
            prev = w
        self.pool_depth = pool_depth
        self.out_channels = prev

    def __call__(self, image, mask) -> Tensor:
        image, mask = as_tensor(image), as_tensor(mask)
        if image.ndim != 4 or image.shape[1] != 3 or mask.shape != (image.shape[0], 1) + image.shape[2:]:
            raise ShapeMismatch(f"backbone expects (B,3,H,W) image and (B,1,H,W) mask, got {image.shape} {mask.shape}")
        x = F.concat([image, mask], axis=1)
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i < self.pool_depth:
                x = F.max_pool2d(x)
        return x


def node_descriptors(n: tuple[int, ...]) -> list[tuple[int, int, int, int]]:
    """(scale level, grid size, row, col) for every node, in node order."""
    return [(lvl, nl, r, c) for lvl, nl in enumerate(n) for r in range(nl) for c in range(nl)]


class NodeHead(Module):
    """One branch per grid size: three Conv-BN-ReLU groups then adaptive
    average pooling to n x n, flattened row-major to n^2 nodes of width C."""

    def __init__(self, rng: Rng, in_ch: int, C: int, n: tuple[int, ...]):
        self.n = tuple(n)
        self.branches = []
        for lvl, nl in enumerate(self.n):
            r = rng.child(f"scale{lvl}")
            self.branches.append([ConvBNReLU(r.child(f"g{g}"), in_ch if g == 0 else C, C) for g in range(3)])

    @property
    def n_nodes(self) -> int:
        return sum(nl * nl for nl in self.n)

    def __call__(self, fmap: Tensor) -> Tensor:
        B, _, Hf, Wf = fmap.shape
        for nl in self.n:
            if nl > min(Hf, Wf):
                raise InvalidGrid(f"grid {nl}x{nl} exceeds {Hf}x{Wf} feature map")
        out = []
        for nl, groups in zip(self.n, self.branches):
            x = fmap
            for g in groups:
                x = g(x)
            x = F.adaptive_avg_pool2d(x, nl)  # (B, C, nl, nl)
            C = x.shape[1]
            out.append(F.transpose(F.reshape(x, (B, C, nl * nl)), (0, 2, 1)))
        return out[0] if len(out) == 1 else F.concat(out, axis=1)


class CrossAttention(Module):
    """Foreground-to-background multi-head attention with placement encodings.

    Per head h: alpha = softmax_j((f_fg Wq_h)(f_bg_j Wk_h + pK_hj)^T / sqrt(d)),
    o_h = sum_j alpha_j (f_bg_j Wv_h + pV_hj). Heads are concatenated and
    projected by a biased linear layer.
    """

    def __init__(self, rng: Rng, C: int, heads: int, n_nodes: int,
                 use_pk: bool = True, use_pv: bool = True, share_encodings: bool = False):
        self.C, self.heads, self.n_nodes = C, heads, n_nodes
        self.d = C // heads
        self.w_q = Linear(rng.child("q"), C, C, bias=False)
        self.w_k = Linear(rng.child("k"), C, C, bias=False)
        self.w_v = Linear(rng.child("v"), C, C, bias=False)
        enc_heads = 1 if share_encodings else heads
        self.p_k = param(rng.child("pk").normal(size=(enc_heads, n_nodes, self.d), scale=0.02)) if use_pk else None
        self.p_v = param(rng.child("pv").normal(size=(enc_heads, n_nodes, self.d), scale=0.02)) if use_pv else None
        self.out = Linear(rng.child("out"), C, C, bias=True)

    def _split(self, x: Tensor) -> Tensor:
        B, N, _ = x.shape
        return F.transpose(F.reshape(x, (B, N, self.heads, self.d)), (0, 2, 1, 3))

    def __call__(self, f_fg: Tensor, f_bg: Tensor) -> tuple[Tensor, Tensor]:
        """f_fg (B, 1, C), f_bg (B, N, C) -> x_att (B, C), alphas (B, heads, N)."""
        if f_bg.shape[1] != self.n_nodes:
            raise ShapeMismatch(f"{f_bg.shape[1]} background nodes, encodings sized for {self.n_nodes}")
        B = f_fg.shape[0]
        q = self._split(self.w_q(f_fg))  # (B, h, 1, d)
        k = self._split(self.w_k(f_bg))  # (B, h, N, d)
        v = self._split(self.w_v(f_bg))
        if self.p_k is not None:
            k = k + self.p_k
        if self.p_v is not None:
            v = v + self.p_v
        logits = F.matmul(q, F.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d))
        alpha = F.softmax(logits, axis=-1)  # (B, h, 1, N)
        o = F.matmul(alpha, v)  # (B, h, 1, d)
        o = F.reshape(F.transpose(o, (0, 2, 1, 3)), (B, self.C))
        return self.out(o), F.reshape(alpha, (B, self.heads, self.n_nodes))


class Regressor(Module):
    """[x_att, z] -> FC -> ReLU -> FC -> ReLU -> FC(3) -> (tanh + 1) / 2."""

    def __init__(self, rng: Rng, C: int, C_z: int, hidden: int):
        self.fc1 = Linear(rng.child("fc1"), C + C_z, hidden)
        self.fc2 = Linear(rng.child("fc2"), hidden, hidden)
        self.fc3 = Linear(rng.child("fc3"), hidden, 3)

    def __call__(self, x_att, z) -> Tensor:
        h = F.concat([as_tensor(x_att), as_tensor(z)], axis=1)
        h = F.relu(self.fc1(h))
        h = F.relu(self.fc2(h))
        return (F.tanh(self.fc3(h)) + 1.0) * 0.5


class GCM(Module):
    def __init__(self, rng: Rng, cfg: GCMConfig):
        self.cfg = cfg
        if max(cfg.n_bg + cfg.n_fg) > cfg.feature_side:
            raise InvalidGrid(f"grids {cfg.n_bg} exceed the {cfg.feature_side}x{cfg.feature_side} feature map")
        self.backbone = Backbone(rng.child("backbone"), cfg.backbone_widths, cfg.pool_depth)
        c_in = self.backbone.out_channels
        self.neh_fg = NodeHead(rng.child("neh_fg"), c_in, cfg.C, cfg.n_fg)
        self.neh_bg = NodeHead(rng.child("neh_bg"), c_in, cfg.C, cfg.n_bg)
        self.attention = CrossAttention(
            rng.child("attention"), cfg.C, cfg.heads, cfg.n_nodes, cfg.use_pk, cfg.use_pv, cfg.share_encodings
        )
        self.regressor = Regressor(rng.child("regressor"), cfg.C, cfg.C_z, cfg.reg_hidden)

    def attend(self, bg, fg, mask) -> tuple[Tensor, Tensor]:
        """Encode the pair and run cross-attention -> (x_att, alphas)."""
        bg, fg, mask = as_tensor(bg), as_tensor(fg), as_tensor(mask)
        zeros = Tensor(np.zeros((bg.shape[0], 1) + bg.shape[2:]))
        f_fg = self.neh_fg(self.backbone(fg, mask))
        f_bg = self.neh_bg(self.backbone(bg, zeros))
        return self.attention(f_fg, f_bg)

    def __call__(self, bg, fg, mask, z) -> Tensor:
        x_att, _ = self.attend(bg, fg, mask)
        return self.regressor(x_att, z)


def attention_argmax(alphas: np.ndarray, n: tuple[int, ...], H: int, W: int) -> list[tuple[int, tuple[int, int, int, int]]]:
    """For each head, the 1-based index of its most attended node and that
    node's region ``(x, y, w, h)`` in image pixels."""
    alphas = np.asarray(getattr(alphas, "data", alphas))
    desc = node_descriptors(tuple(n))
    if alphas.shape[-1] != len(desc):
        raise ShapeMismatch(f"alphas over {alphas.shape[-1]} nodes, grid {n} has {len(desc)}")
    out = []
    for row in alphas.reshape(-1, len(desc)):
        j = int(np.argmax(row))
        _, nl, r, c = desc[j]
        x0, x1 = c * W // nl, (c + 1) * W // nl
        y0, y1 = r * H // nl, (r + 1) * H // nl
        out.append((j + 1, (x0, y0, x1 - x0, y1 - y0)))
    return out
