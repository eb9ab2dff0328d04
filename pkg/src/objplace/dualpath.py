"""Generator/discriminator pair, latent encoder, losses and dual-path training.

Path u draws z from N(0, I); path s encodes z from a positive composite.
Both paths run through the same GCM, so the generator is one parameter
registry. The discriminator has its own registry.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import config as kvconfig
from .diffcore import (
    CheckpointError,
    Conv2d,
    Linear,
    Module,
    ParamRegistry,
    Rng,
    Tensor,
    adam_step,
    as_tensor,
    load_checkpoint,
    no_grad,
    read_checkpoint,
    save_checkpoint,
)
from .diffcore import F
from .gcm import GCM, GCMConfig, NodeHead, preset
from .geometry import bbox_from_mask, composite, tgt_from_bbox

P_CLAMP = 1e-7
REC_VARIANTS = ("l1_uniform", "l2_uniform", "l2_linear", "l2_trig")
PAPER_LR = (2e-5, 2e-4)  # (backbone and discriminator, everything else)


# --- configuration -----------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    # model
    model: str = "desk"
    side: int = 64
    C: Optional[int] = None
    C_z: Optional[int] = None
    n_bg: Optional[tuple[int, ...]] = None
    use_pk: bool = True
    use_pv: bool = True
    share_encodings: bool = False
    d_widths: tuple[int, ...] = (32, 64, 128, 128)
    # objective
    lambda_rec: float = 50.0
    rec_variant: str = "l2_trig"
    path_u: bool = True
    path_s: bool = True
    use_adv_u: bool = True
    use_adv_s: bool = True
    use_kld: bool = True
    use_rec: bool = True
    use_cls: bool = True
    use_negatives: bool = True
    saturating_gen: bool = False
    freeze_latent_backbone: bool = False
    fixed_latent_noise: bool = False
    # optimisation
    lr_low: float = 1e-4
    lr_high: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 8
    seed: int = 0
    max_steps: int = 0
    overfit: int = 0
    overfit_lr: float = 1e-4  # both groups; a batch of one diverges at the regular rates
    ckpt_every: int = 1  # epochs between checkpoints; 0 keeps only the final last.opck
    probe_scenes: int = 50

    def __post_init__(self):
        if self.rec_variant not in REC_VARIANTS:
            raise kvconfig.ConfigError(f"rec_variant must be one of {REC_VARIANTS}, got {self.rec_variant!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.ckpt_every < 0:
            raise kvconfig.ConfigError("batch_size must be >= 1, epochs and ckpt_every >= 0")
        if not (self.path_u or self.path_s):
            raise kvconfig.ConfigError("at least one of path_u, path_s must be enabled")

    def gcm_config(self) -> GCMConfig:
        over = {k: getattr(self, k) for k in ("C", "C_z", "n_bg") if getattr(self, k) is not None}
        return preset(
            self.model,
            side=self.side,
            use_pk=self.use_pk,
            use_pv=self.use_pv,
            share_encodings=self.share_encodings,
            **over,
        )

    def effective(self) -> "TrainConfig":
        """Overfit mode: supervised path only, rec and KL only, fixed noise,
        one learning rate for every group, and a single final checkpoint
        (an epoch is one step here)."""
        if not self.overfit:
            return self
        return dataclasses.replace(
            self,
            path_u=False,
            use_adv_u=False,
            use_adv_s=False,
            use_cls=False,
            fixed_latent_noise=True,
            batch_size=1,
            lr_low=self.overfit_lr,
            lr_high=self.overfit_lr,
            ckpt_every=0,
        )

    @property
    def lrs(self) -> dict[str, float]:
        return {"low": self.lr_low, "high": self.lr_high}


# --- networks ----------------------------------------------------------------
class Discriminator(Module):
    """Four stride-2 4x4 conv + leaky-ReLU blocks, global average, linear."""

    def __init__(self, rng: Rng, widths: tuple[int, ...] = (32, 64, 128, 128), in_ch: int = 4):
        self.convs = []
        prev = in_ch
        for i, w in enumerate(widths):
            self.convs.append(Conv2d(rng.child(f"conv{i}"), prev, w, k=4, stride=2, pad=1))
            prev = w
        self.fc = Linear(rng.child("fc"), prev, 1)

    def logits(self, image, mask) -> Tensor:
        x = F.concat([as_tensor(image), as_tensor(mask)], axis=1)
        for c in self.convs:
            x = F.leaky_relu(c(x), 0.2)
        x = F.mean(x, axis=(2, 3))
        return F.reshape(self.fc(x), (x.shape[0],))

    def __call__(self, image, mask) -> Tensor:
        return F.sigmoid(self.logits(image, mask))


@dataclass
class LatentDistribution:
    mu: Tensor  # (B, C_z)
    logvar: Tensor

    @property
    def sigma(self) -> Tensor:
        return F.exp(self.logvar * 0.5)

    def sample(self, eps: np.ndarray) -> Tensor:
        return self.mu + self.sigma * eps


class LatentHead(Module):
    """Single-node head over backbone features followed by parallel mu and
    log-variance layers. Both layers start at zero, so the initial posterior
    is the prior."""

    def __init__(self, rng: Rng, in_ch: int, C: int, C_z: int):
        self.neh = NodeHead(rng.child("neh"), in_ch, C, (1,))
        self.mu = Linear(rng.child("mu"), C, C_z)
        self.logvar = Linear(rng.child("logvar"), C, C_z)
        for lin in (self.mu, self.logvar):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0

    def __call__(self, fmap: Tensor) -> LatentDistribution:
        f = self.neh(fmap)
        f = F.reshape(f, (f.shape[0], f.shape[2]))
        return LatentDistribution(self.mu(f), self.logvar(f))


class DualPathModel:
    """GCM + latent head (generator registry) and the discriminator."""

    SUBMODULES = ("backbone", "neh_fg", "neh_bg", "attention", "regressor", "latent", "disc")

    def __init__(self, rng: Rng, gcm_cfg: GCMConfig, d_widths: tuple[int, ...] = (32, 64, 128, 128)):
        self.cfg = gcm_cfg
        self.d_widths = tuple(d_widths)
        self.gcm = GCM(rng.child("gcm"), gcm_cfg)
        self.latent = LatentHead(rng.child("latent"), self.gcm.backbone.out_channels, gcm_cfg.C, gcm_cfg.C_z)
        self.disc = Discriminator(rng.child("disc"), self.d_widths)
        self.g_reg = ParamRegistry()
        self.g_reg.add_module("backbone", self.gcm.backbone, "low")
        for name in ("neh_fg", "neh_bg", "attention", "regressor"):
            self.g_reg.add_module(name, getattr(self.gcm, name), "high")
        self.g_reg.add_module("latent", self.latent, "high")
        self.d_reg = ParamRegistry()
        self.d_reg.add_module("disc", self.disc, "low")

    def arch(self) -> dict:
        return {"gcm": self.cfg.to_dict(), "d_widths": list(self.d_widths)}

    def train(self, mode: bool = True) -> None:
        for m in (self.gcm, self.latent, self.disc):
            m.train(mode)

    def buffers(self) -> dict[str, np.ndarray]:
        out = dict(self.gcm.named_buffers("gcm."))
        out.update(self.latent.named_buffers("latent."))
        return out

    def registries(self) -> dict[str, ParamRegistry]:
        return {"G": self.g_reg, "D": self.d_reg}

    def encode_latent(self, comp, comp_mask, freeze_backbone: bool = False) -> LatentDistribution:
        fmap = self.gcm.backbone(comp, comp_mask)
        if freeze_backbone:
            fmap = F.stop_gradient(fmap)
        return self.latent(fmap)

    def generate(self, bg, fg, mask, z) -> tuple[Tensor, Tensor, Tensor]:
        """(I_c, M_c, t) for batched inputs and latent codes z (B, C_z)."""
        t = self.gcm(bg, fg, mask, z)
        ic, mc = composite(bg, fg, mask, t)
        return ic, mc, t


@contextlib.contextmanager
def frozen(module: Module):
    """Temporarily stop gradient accumulation into a module's parameters."""
    ps = module.parameters()
    for p in ps:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in ps:
            p.requires_grad = True


# --- losses ------------------------------------------------------------------
def loss_kld(d: LatentDistribution) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)), averaged over latent dimensions and batch."""
    return F.mean((d.mu * d.mu + F.exp(d.logvar) - 1.0 - d.logvar) * 0.5)


def rec_weights(variant: str, t_r: np.ndarray) -> np.ndarray:
    """Per-field weights (B, 3) from a detached scale column."""
    t_r = np.asarray(t_r, dtype=np.float64)
    if variant in ("l1_uniform", "l2_uniform"):
        return np.ones(t_r.shape + (3,))
    if variant == "l2_linear":
        a_r, a_xy = t_r, 1.0 - t_r
    elif variant == "l2_trig":
        a_r, a_xy = np.sin(np.pi * t_r / 2), np.cos(np.pi * t_r / 2)
    else:
        raise ValueError(f"unknown reconstruction variant {variant!r}")
    return np.stack([a_r, a_xy, a_xy], axis=-1)


def loss_rec(t_s, t_gt, variant: str = "l2_trig", weight_at=None) -> Tensor:
    """Weighted squared error averaged over batch and fields (L2 variants) or
    mean absolute error. Weights use the detached predicted scale, or
    ``weight_at`` when given."""
    t_s = as_tensor(t_s)
    if t_s.ndim == 1:
        t_s = F.reshape(t_s, (1, 3))
    t_gt = np.asarray(t_gt, dtype=np.float64).reshape(t_s.shape)
    diff = t_s - t_gt
    if variant == "l1_uniform":
        return F.mean(F.absolute(diff))
    w = rec_weights(variant, t_s.data[:, 0] if weight_at is None else weight_at)
    return F.mean(diff * diff * w)


def _log_p(p: Tensor) -> Tensor:
    return F.log(F.clamp(p, P_CLAMP, 1.0 - P_CLAMP))


def _log_1mp(p: Tensor) -> Tensor:
    return F.log(1.0 - F.clamp(p, P_CLAMP, 1.0 - P_CLAMP))


def gan_value(p_real, p_fake) -> Tensor:
    """E log D(real) + E log(1 - D(fake)); the discriminator maximises it.
    With real = positive and fake = negative composites this is L_cls."""
    return F.mean(_log_p(as_tensor(p_real))) + F.mean(_log_1mp(as_tensor(p_fake)))


def generator_loss(p_fake, saturating: bool = False) -> Tensor:
    """Non-saturating -E log D(fake), or the minimax E log(1 - D(fake))."""
    p_fake = as_tensor(p_fake)
    if saturating:
        return F.mean(_log_1mp(p_fake))
    return -F.mean(_log_p(p_fake))


# --- training ----------------------------------------------------------------
@dataclass
class Batch:
    bg: np.ndarray  # (B, 3, H, W)
    fg: np.ndarray
    mask: np.ndarray  # (B, 1, H, W)
    comp: np.ndarray  # positive composites
    comp_mask: np.ndarray
    t_gt: np.ndarray  # (B, 3)
    neg: np.ndarray | None = None
    neg_mask: np.ndarray | None = None


@dataclass
class LossBreakdown:
    """Scalars of one step. ``adv_u``/``adv_s`` are the generator terms that
    were minimised, ``cls`` is E log D(pos) + E log(1 - D(neg)) as seen by the
    discriminator before its update. Disabled terms are 0."""

    adv_u: float = 0.0
    adv_s: float = 0.0
    kld: float = 0.0
    rec: float = 0.0
    cls: float = 0.0
    total: float = 0.0
    total_d: float = 0.0
    lam: float = 50.0

    FIELDS = ("adv_u", "adv_s", "kld", "rec", "cls", "total", "total_d")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in self.FIELDS)


def _tile(a: np.ndarray, n: int) -> np.ndarray:
    return a if n == 1 else np.concatenate([a] * n, axis=0)


def train_step(batch: Batch, model: DualPathModel, cfg: TrainConfig, rng: Rng) -> LossBreakdown:
    """One discriminator update on detached fakes, then one generator update."""
    cfg = cfg.effective()
    B = batch.bg.shape[0]
    C_z = model.cfg.C_z
    out = LossBreakdown(lam=cfg.lambda_rec)
    adv_u = cfg.path_u and cfg.use_adv_u
    adv_s = cfg.path_s and cfg.use_adv_s
    cls = cfg.use_cls and cfg.use_negatives and batch.neg is not None

    # both paths see the same (bg, fg, mask), so the attention output is shared
    x_att, _ = model.gcm.attend(batch.bg, batch.fg, batch.mask)
    zs, dist = [], None
    if cfg.path_u:
        zs.append(Tensor(rng.child("z_u").normal(size=(B, C_z))))
    if cfg.path_s:
        dist = model.encode_latent(batch.comp, batch.comp_mask, cfg.freeze_latent_backbone)
        noise = Rng(cfg.seed).child("fixed_eps") if cfg.fixed_latent_noise else rng.child("eps")
        zs.append(dist.sample(noise.normal(size=(B, C_z))))
    n = len(zs)
    t = model.gcm.regressor(F.concat([x_att] * n, axis=0) if n > 1 else x_att, F.concat(zs, axis=0) if n > 1 else zs[0])
    need_images = adv_u or adv_s
    if need_images:
        ic, mc = composite(_tile(batch.bg, n), _tile(batch.fg, n), _tile(batch.mask, n), t)
    sl_u = slice(0, B) if cfg.path_u else None
    sl_s = slice(B * (n - 1), B * n) if cfg.path_s else None

    # discriminator step
    if adv_u or adv_s or cls:
        imgs, masks = [], []
        if adv_u or adv_s:
            imgs.append(batch.comp)
            masks.append(batch.comp_mask)
        fake_idx = []
        if adv_u:
            fake_idx.append(sl_u)
        if adv_s:
            fake_idx.append(sl_s)
        for sl in fake_idx:
            imgs.append(ic.data[sl])
            masks.append(mc.data[sl])
        if cls:
            if not (adv_u or adv_s):
                imgs.append(batch.comp)
                masks.append(batch.comp_mask)
            imgs.append(batch.neg)
            masks.append(batch.neg_mask)
        p = model.disc(np.concatenate(imgs), np.concatenate(masks))
        off = 0
        p_real = p[off : off + B]
        off += B
        value = None
        for _ in fake_idx:
            term = gan_value(p_real, p[off : off + B])
            value = term if value is None else value + term
            off += B
        if cls:
            nb = batch.neg.shape[0]
            term = gan_value(p_real, p[off : off + nb])
            out.cls = term.item()
            value = term if value is None else value + term
        loss_d = -value
        out.total_d = loss_d.item()
        model.d_reg.zero_grad()
        loss_d.backward()
        adam_step(model.d_reg, cfg.lr_low, cfg.beta1, cfg.beta2)

    # generator step
    total = None

    def add(term):
        nonlocal total
        total = term if total is None else total + term

    if need_images:
        fake_sl = [sl for sl, on in ((sl_u, adv_u), (sl_s, adv_s)) if on]
        with frozen(model.disc):
            if len(fake_sl) == 2:
                p_fake = model.disc(ic, mc)
            else:
                sl = fake_sl[0]
                p_fake = model.disc(ic[sl], mc[sl])
        off = 0
        if adv_u:
            g = generator_loss(p_fake[off : off + B], cfg.saturating_gen)
            out.adv_u = g.item()
            add(g)
            off += B
        if adv_s:
            g = generator_loss(p_fake[off : off + B], cfg.saturating_gen)
            out.adv_s = g.item()
            add(g)
    if cfg.path_s:
        t_s = t[sl_s]
        if cfg.use_kld:
            k = loss_kld(dist)
            out.kld = k.item()
            add(k)
        if cfg.use_rec:
            r = loss_rec(t_s, batch.t_gt, cfg.rec_variant)
            out.rec = r.item()
            add(r * cfg.lambda_rec)
    model.g_reg.zero_grad()
    if total is not None and total.requires_grad:
        out.total = total.item()
        total.backward()
        adam_step(model.g_reg, cfg.lrs, cfg.beta1, cfg.beta2)
    elif total is not None:
        out.total = total.item()
    return out


# --- inference ---------------------------------------------------------------
def sample_placements(model: DualPathModel, bg, fg, mask, rng: Rng, k: int = 10) -> np.ndarray:
    """Path-u placements for a batch of scenes -> (B, k, 3). Eval mode, no
    parameter or buffer changes."""
    bg, fg, mask = (np.asarray(a, dtype=np.float64) for a in (bg, fg, mask))
    B = bg.shape[0]
    was = model.gcm.training
    model.train(False)
    try:
        with no_grad():
            x_att, _ = model.gcm.attend(bg, fg, mask)
            z = rng.normal(size=(B, k, model.cfg.C_z)).reshape(B * k, -1)
            xa = np.repeat(x_att.data, k, axis=0)
            t = model.gcm.regressor(xa, z).data
    finally:
        model.train(was)
    return t.reshape(B, k, 3)


def infer(model: DualPathModel, bg, fg, mask, rng: Rng, k: int = 10) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """k independent placements for one scene -> [(I_c, M_c, t)]."""
    bg, fg, mask = (np.asarray(a, dtype=np.float64) for a in (bg, fg, mask))
    ts = sample_placements(model, bg[None], fg[None], mask[None], rng, k)[0]
    with no_grad():
        ic, mc = composite(np.stack([bg] * k), np.stack([fg] * k), np.stack([mask] * k), ts)
    return [(ic.data[i], mc.data[i], ts[i]) for i in range(k)]


# --- data and loop -----------------------------------------------------------
class TrainingData:
    """Positive and negative samples of a loaded split, with ground-truth
    placements recovered from the composite masks."""

    def __init__(self, split):
        self.split = split
        self.pos = split.positives()
        self.neg = split.negatives()
        H, W = split.comp_mask.shape[2:]
        self.t_gt = np.array(
            [tgt_from_bbox(bbox_from_mask(split.comp_mask[i]), W, H).as_array() for i in self.pos]
        ).reshape(-1, 3)

    def batch(self, pos_rows: np.ndarray, neg_idx: np.ndarray | None) -> Batch:
        s = self.split
        ids = self.pos[pos_rows]
        sc = s.scene_index[ids]
        b = Batch(s.bg[sc], s.fg[sc], s.mask[sc], s.comp[ids], s.comp_mask[ids], self.t_gt[pos_rows])
        if neg_idx is not None and len(neg_idx):
            b.neg, b.neg_mask = s.comp[neg_idx], s.comp_mask[neg_idx]
        return b


METRIC_COLUMNS = ("epoch", "step", "adv_u", "adv_s", "kld", "rec", "cls", "loss_g", "loss_d", "probe_accuracy")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.10g}"


def _metric_row(epoch: int, step: int, losses: list[LossBreakdown], acc: float | None) -> list[str]:
    m = np.mean([l.as_tuple() for l in losses], axis=0) if losses else [float("nan")] * 7
    adv_u, adv_s, kld, rec, cls, tot, tot_d = (float(x) for x in m)
    return [_fmt(x) for x in (epoch, step, adv_u, adv_s, kld, rec, cls, tot, tot_d, acc)]


def _write_rows(path: Path, rows: list[list[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _read_rows(path: Path) -> list[list[str]]:
    if not path.exists():
        return []
    rows = list(csv.reader(path.read_text().splitlines()))
    return rows[1:]


def build_model(cfg: TrainConfig) -> DualPathModel:
    return DualPathModel(Rng(cfg.seed).child("init"), cfg.gcm_config(), cfg.d_widths)


def checkpoint_meta(model: DualPathModel, cfg: TrainConfig, epoch: int, step: int) -> dict:
    return {"arch": model.arch(), "train": kvconfig.dump(cfg), "epoch": epoch, "step": step}


def save_model(path, model: DualPathModel, cfg: TrainConfig, epoch: int, step: int) -> None:
    save_checkpoint(path, model.registries(), model.buffers(), checkpoint_meta(model, cfg, epoch, step))


def load_model(path, with_optimizer: bool = False) -> tuple[DualPathModel, TrainConfig, dict]:
    """Rebuild the model described by a checkpoint header and load it."""
    header, _ = read_checkpoint(path)
    meta = header["meta"]
    try:
        cfg = kvconfig.build(TrainConfig, kvconfig.parse_kv_text(meta["train"], str(path)))
        gcm_cfg = GCMConfig.from_dict(meta["arch"]["gcm"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: header lacks a model description") from e
    model = DualPathModel(Rng(cfg.seed).child("init"), gcm_cfg, tuple(meta["arch"]["d_widths"]))
    load_checkpoint(path, model.registries(), model.buffers(), with_optimizer)
    return model, cfg, meta


def probe_accuracy(model: DualPathModel, split, seed: int) -> float:
    from .eval import placement_accuracy

    return placement_accuracy(model, split, Rng(seed).child("probe"), k=1)


def train(
    cfg: TrainConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    resume: bool = False,
    log: Callable[[str], None] | None = None,
) -> DualPathModel:
    """Train, writing ``config.txt``, ``metrics.csv``, checkpoints
    ``ckpt_epochNNN.opck`` every ``ckpt_every`` epochs and ``last.opck`` to
    ``out_dir``.

    Batch order and noise derive from (seed, epoch, step) only, so a run
    resumed from an epoch checkpoint continues exactly as the uninterrupted
    run would have.
    """
    from .synthdata import load_split

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(kvconfig.dump(cfg))
    eff = cfg.effective()
    data = TrainingData(load_split(data_dir, "train"))
    if len(data.pos) == 0:
        raise ValueError(f"{data_dir}: training split has no positive samples")
    probe = None
    if eff.probe_scenes > 0 and not eff.overfit:
        try:
            probe = load_split(data_dir, "test", limit=eff.probe_scenes)
        except FileNotFoundError:
            probe = None
        if probe is not None and len(probe.specs) == 0:
            probe = None

    model = build_model(cfg)
    start_epoch, step = 0, 0
    rows: list[list[str]] = []
    metrics = out / "metrics.csv"
    if resume and (out / "last.opck").exists():
        header, _ = read_checkpoint(out / "last.opck")
        if header["meta"].get("arch") != model.arch():
            raise CheckpointError("checkpoint architecture does not match the config")
        meta = load_checkpoint(out / "last.opck", model.registries(), model.buffers(), with_optimizer=True)
        start_epoch, step = int(meta["epoch"]), int(meta["step"])
        rows = [r for r in _read_rows(metrics) if int(r[0]) <= start_epoch]

    n_pos = 1 if eff.overfit else len(data.pos)
    B = min(eff.batch_size, n_pos)
    per_epoch = max(1, n_pos // B)
    root = Rng(cfg.seed)
    model.train(True)
    for epoch in range(start_epoch + 1, eff.epochs + 1):
        order = np.zeros(n_pos, dtype=np.int64) if eff.overfit else root.child("order").child(epoch).permutation(n_pos)
        losses = []
        stopped = False
        for i in range(per_epoch):
            if eff.max_steps and step >= eff.max_steps:
                stopped = True
                break
            srng = root.child("step").child(step)
            neg = None
            if eff.use_negatives and eff.use_cls and len(data.neg):
                neg = data.neg[srng.child("neg").integers(0, len(data.neg), size=B)]
            batch = data.batch(order[i * B : (i + 1) * B], neg)
            losses.append(train_step(batch, model, cfg, srng))
            step += 1
            if log and (step % 10 == 0):
                l = losses[-1]
                log(f"epoch {epoch} step {step} rec {l.rec:.4g} kld {l.kld:.4g} adv_u {l.adv_u:.4g} loss_d {l.total_d:.4g}")
        acc = probe_accuracy(model, probe, cfg.seed) if probe is not None else None
        rows.append(_metric_row(epoch, step, losses, acc))
        _write_rows(metrics, rows)
        if log:
            log(f"epoch {epoch} done, step {step}, probe accuracy {acc}")
        if stopped or (eff.max_steps and step >= eff.max_steps):
            save_model(out / "last.opck", model, cfg, epoch, step)
            break
        periodic = eff.ckpt_every > 0 and epoch % eff.ckpt_every == 0
        if periodic:
            save_model(out / f"ckpt_epoch{epoch:03d}.opck", model, cfg, epoch, step)
        if periodic or epoch == eff.epochs:
            save_model(out / "last.opck", model, cfg, epoch, step)
    if not rows:
        _write_rows(metrics, rows)
    return model
