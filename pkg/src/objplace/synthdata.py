"""Synthetic placement scenes with a deterministic plausibility oracle.

A scene is a sky band over a floor band with up to three occupier blocks
standing on the floor. A placement is plausible when the object stands on
the floor, does not collide with an occupier, and has the size that the
scene's perspective rule expects for its height in the frame:
``t_r* = s0 + s1 * bottom / H`` within tolerance ``tau``.

The rule is visible in the pixels: occupiers are drawn at the rule's scale,
floor brightness encodes ``s0`` and sky brightness encodes ``s1``.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Rng, no_grad
from .geometry import BBox, EmptyMask, TransformParams, affine_sample, bbox_from_mask, composite, theta_from_params
from .imagefile import read_mask, read_png, write_png

S0_RANGE = (0.1, 0.2)
S1_RANGE = (0.2, 0.4)
TAU_RANGE = (0.05, 0.1)
FLOOR_TOP_RANGE = (0.4, 0.7)
MAX_OCCUPIERS = 3
OVERLAP_LIMIT = 0.02
DRAW_BUDGET = 10_000


class SamplingExhausted(RuntimeError):
    """No placement with the requested label was found within the budget."""


@dataclass(frozen=True)
class SceneSpec:
    side: int
    floor_top: int
    occupiers: tuple[BBox, ...]
    s0: float
    s1: float
    tau: float
    seed: int = 0
    path: tuple[int, ...] = ()

    def expected_scale(self, bottom: float) -> float:
        return self.s0 + self.s1 * bottom / self.side

    def to_dict(self) -> dict:
        d = asdict(self)
        d["occupiers"] = [list(b.as_tuple()) for b in self.occupiers]
        d["path"] = list(self.path)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["occupiers"] = tuple(BBox(*b) for b in d["occupiers"])
        d["path"] = tuple(d.get("path", ()))
        return cls(**d)


@dataclass
class AnnotatedSample:
    bg: np.ndarray
    fg: np.ndarray
    mask: np.ndarray
    composite: np.ndarray
    composite_mask: np.ndarray
    t: TransformParams
    label: bool
    scene: SceneSpec


def _rgb(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def gen_scene(rng: Rng, side: int = 64) -> tuple[SceneSpec, np.ndarray]:
    H = W = side
    floor_top = int(rng.integers(int(np.ceil(FLOOR_TOP_RANGE[0] * H)), int(FLOOR_TOP_RANGE[1] * H) + 1))
    s0 = float(rng.uniform(*S0_RANGE))
    s1 = float(rng.uniform(*S1_RANGE))
    tau = float(rng.uniform(*TAU_RANGE))

    occupiers = []
    for _ in range(int(rng.integers(0, MAX_OCCUPIERS + 1))):
        bottom = int(rng.integers(floor_top + 2, H + 1))
        h = int(round((s0 + s1 * bottom / H) * H * rng.uniform(0.6, 1.0)))
        h = max(2, min(h, bottom - floor_top))
        w = max(2, int(round(h * rng.uniform(0.5, 1.0))))
        x = int(rng.integers(0, W - w + 1))
        occupiers.append(BBox(x, bottom - h, w, h))
    spec = SceneSpec(side, floor_top, tuple(occupiers), s0, s1, tau, rng.seed, rng.path)

    sky_v = 0.55 + 0.4 * (s1 - S1_RANGE[0]) / (S1_RANGE[1] - S1_RANGE[0])
    floor_v = 0.25 + 0.4 * (s0 - S0_RANGE[0]) / (S0_RANGE[1] - S0_RANGE[0])
    sky = _rgb(rng.uniform(0.5, 0.7), rng.uniform(0.3, 0.6), sky_v)
    floor = _rgb(rng.uniform(0.0, 0.2), rng.uniform(0.3, 0.7), floor_v)
    bg = np.empty((3, H, W))
    bg[:, :floor_top] = sky[:, None, None]
    bg[:, floor_top:] = floor[:, None, None]
    hues = rng.uniform(0, 1, len(occupiers))
    for b, hue in zip(occupiers, hues):
        bg[:, b.y : b.y + b.h, b.x : b.x + b.w] = _rgb(hue, 0.8, 0.9)[:, None, None]
    bg += rng.normal(size=bg.shape, scale=0.01)
    return spec, np.clip(bg, 0.0, 1.0)


def render_fg(rng: Rng, side: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """A full-frame object: solid rectangle or inscribed ellipse with a
    diagonal two-tone pattern."""
    yy, xx = (np.mgrid[0:side, 0:side] + 0.5) / side
    if rng.random() < 0.5:
        mask = np.ones((side, side))
    else:
        mask = (((xx - 0.5) / 0.5) ** 2 + ((yy - 0.5) / 0.5) ** 2 <= 1.0).astype(np.float64)
    hue = rng.uniform(0, 1)
    a, b = _rgb(hue, 0.9, 0.95), _rgb(hue + 0.5, 0.9, 0.6)
    stripes = (np.floor((xx + yy) * rng.integers(2, 6)) % 2)[None]
    fg = np.where(stripes > 0, a[:, None, None], b[:, None, None]) * mask[None]
    return fg, mask[None]


def placed_bbox(mask: np.ndarray, t: TransformParams) -> BBox | None:
    with no_grad():
        m_c = affine_sample(mask, theta_from_params(t)).data
    try:
        return bbox_from_mask(m_c)
    except EmptyMask:
        return None


def check_box(scene: SceneSpec, box: BBox | None) -> bool:
    """The three plausibility rules evaluated on the placed object's box."""
    if box is None:
        return False
    H = scene.side
    bottom = box.y + box.h
    if not scene.floor_top <= bottom <= H:
        return False
    area = box.w * box.h
    for occ in scene.occupiers:
        ix = max(0, min(box.x + box.w, occ.x + occ.w) - max(box.x, occ.x))
        iy = max(0, min(box.y + box.h, occ.y + occ.h) - max(box.y, occ.y))
        if ix * iy >= OVERLAP_LIMIT * area:
            return False
    t_r = max(box.w, box.h) / H
    return abs(t_r - scene.expected_scale(bottom)) <= scene.tau


def oracle(scene: SceneSpec, t: TransformParams, mask: np.ndarray) -> bool:
    return check_box(scene, placed_bbox(mask, t))


def _draw_t(rng: Rng) -> TransformParams:
    return TransformParams(*rng.uniform(0, 1, 3))


def sample_placement(rng: Rng, scene: SceneSpec, mask: np.ndarray, want: bool, budget: int = DRAW_BUDGET) -> TransformParams:
    for _ in range(budget):
        t = _draw_t(rng)
        if oracle(scene, t, mask) == want:
            return t
    raise SamplingExhausted(f"no {'positive' if want else 'negative'} placement in {budget} draws")


def random_baseline_rate(scenes: list[tuple[SceneSpec, np.ndarray]], rng: Rng, draws_per_scene: int = 50) -> float:
    hits = total = 0
    for scene, mask in scenes:
        for _ in range(draws_per_scene):
            hits += oracle(scene, _draw_t(rng), mask)
            total += 1
    return hits / max(total, 1)


@dataclass
class SceneBundle:
    spec: SceneSpec
    bg: np.ndarray
    fg: np.ndarray
    mask: np.ndarray
    samples: list[AnnotatedSample] = field(default_factory=list)


def gen_scene_bundle(rng: Rng, side: int, n_pos: int, n_neg: int, max_attempts: int = 20) -> SceneBundle:
    """One scene with its foreground and labelled placements. A scene that
    admits no positive within the budget is discarded and redrawn."""
    for attempt in range(max_attempts):
        r = rng.child(attempt)
        spec, bg = gen_scene(r.child("scene"), side)
        fg, mask = render_fg(r.child("fg"), side)
        draw = r.child("placements")
        try:
            ts = [(sample_placement(draw, spec, mask, True), True) for _ in range(n_pos)]
            ts += [(sample_placement(draw, spec, mask, False), False) for _ in range(n_neg)]
        except SamplingExhausted:
            continue
        bundle = SceneBundle(spec, bg, fg, mask)
        with no_grad():
            for t, label in ts:
                ic, mc = composite(bg, fg, mask, t)
                bundle.samples.append(AnnotatedSample(bg, fg, mask, ic.data, mc.data, t, label, spec))
        return bundle
    raise SamplingExhausted(f"{max_attempts} consecutive scenes admitted no positive placement")


def gen_dataset(rng: Rng, n_scenes: int, pos_per_scene: int = 2, neg_per_scene: int = 4, side: int = 64) -> tuple[list[SceneBundle], dict]:
    bundles = [gen_scene_bundle(rng.child(f"scene{i}"), side, pos_per_scene, neg_per_scene) for i in range(n_scenes)]
    baseline = random_baseline_rate([(b.spec, b.mask) for b in bundles], rng.child("baseline"))
    manifest = {
        "seed": rng.seed,
        "side": side,
        "n_scenes": n_scenes,
        "pos_per_scene": pos_per_scene,
        "neg_per_scene": neg_per_scene,
        "n_positive": sum(s.label for b in bundles for s in b.samples),
        "n_negative": sum(not s.label for b in bundles for s in b.samples),
        "random_baseline_rate": baseline,
    }
    return bundles, manifest


# --- on-disk layout --------------------------------------------------------------
#
#   DIR/manifest.json
#   DIR/<split>/scene_00012/bg.png fg.png mask.png
#   DIR/<split>/scene_00012/pos_0/comp.png comp_mask.png meta.txt   (and neg_k/)
#
# The scene files are shared by that scene's samples; each sample directory
# carries its composite, composite mask and a key=value meta record.


def _sample_dirs(bundle: SceneBundle) -> list[str]:
    names, counts = [], {True: 0, False: 0}
    for s in bundle.samples:
        names.append(f"{'pos' if s.label else 'neg'}_{counts[s.label]}")
        counts[s.label] += 1
    return names


def write_split(root: Path, split: str, bundles: list[SceneBundle]) -> list[dict]:
    entries = []
    for i, b in enumerate(bundles):
        sdir = root / split / f"scene_{i:05d}"
        sdir.mkdir(parents=True, exist_ok=True)
        write_png(sdir / "bg.png", b.bg)
        write_png(sdir / "fg.png", b.fg)
        write_png(sdir / "mask.png", b.mask)
        samples = []
        for name, s in zip(_sample_dirs(b), b.samples):
            d = sdir / name
            d.mkdir(exist_ok=True)
            write_png(d / "comp.png", s.composite)
            write_png(d / "comp_mask.png", s.composite_mask)
            (d / "meta.txt").write_text(
                f"t_r={s.t.t_r:.12f}\nt_x={s.t.t_x:.12f}\nt_y={s.t.t_y:.12f}\n"
                f"label={'positive' if s.label else 'negative'}\n"
                f"scene_seed={b.spec.seed}\nscene_path={'/'.join(map(str, b.spec.path))}\n"
            )
            samples.append({"dir": name, "label": s.label, "t": [s.t.t_r, s.t.t_x, s.t.t_y]})
        entries.append({"dir": f"{split}/scene_{i:05d}", "spec": b.spec.to_dict(), "samples": samples})
    return entries


def write_dataset(out: str | Path, seed: int, n_scenes: int, pos: int, neg: int, side: int = 64, test_scenes: int = 100) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    root = Rng(seed)
    train, m_train = gen_dataset(root.child("train"), n_scenes, pos, neg, side)
    test, m_test = gen_dataset(root.child("test"), test_scenes, pos, neg, side) if test_scenes else ([], None)
    manifest = {
        "format": 1,
        "seed": seed,
        "side": side,
        "pos_per_scene": pos,
        "neg_per_scene": neg,
        "splits": {"train": m_train, "test": m_test},
        "train": write_split(out, "train", train),
        "test": write_split(out, "test", test),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def manifest_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class LoadedSplit:
    """Arrays for one split. Scene-level arrays are indexed by scene; sample
    arrays carry ``scene_index`` back into them."""

    specs: list[SceneSpec]
    bg: np.ndarray  # (S, 3, H, W)
    fg: np.ndarray
    mask: np.ndarray  # (S, 1, H, W)
    comp: np.ndarray  # (N, 3, H, W)
    comp_mask: np.ndarray  # (N, 1, H, W)
    t: np.ndarray  # (N, 3) stored placement
    label: np.ndarray  # (N,) bool
    scene_index: np.ndarray  # (N,)

    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.label)

    def negatives(self) -> np.ndarray:
        return np.flatnonzero(~self.label)


def load_split(root: str | Path, split: str = "train", limit: int | None = None) -> LoadedSplit:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{root}: no manifest.json (not a synthetic dataset directory)")
    manifest = json.loads(mpath.read_text())
    scenes = manifest[split][:limit] if limit else manifest[split]
    specs, bg, fg, mask = [], [], [], []
    comp, cmask, ts, labels, idx = [], [], [], [], []
    for i, entry in enumerate(scenes):
        sdir = root / entry["dir"]
        specs.append(SceneSpec.from_dict(entry["spec"]))
        bg.append(read_png(sdir / "bg.png", "RGB"))
        fg.append(read_png(sdir / "fg.png", "RGB"))
        mask.append(read_mask(sdir / "mask.png"))
        for s in entry["samples"]:
            comp.append(read_png(sdir / s["dir"] / "comp.png", "RGB"))
            cmask.append(read_mask(sdir / s["dir"] / "comp_mask.png"))
            ts.append(s["t"])
            labels.append(bool(s["label"]))
            idx.append(i)
    side = manifest["side"]
    empty = lambda c: np.zeros((0, c, side, side))  # noqa: E731
    return LoadedSplit(
        specs,
        np.stack(bg) if bg else empty(3),
        np.stack(fg) if fg else empty(3),
        np.stack(mask) if mask else empty(1),
        np.stack(comp) if comp else empty(3),
        np.stack(cmask) if cmask else empty(1),
        np.array(ts).reshape(-1, 3),
        np.array(labels, dtype=bool),
        np.array(idx, dtype=np.int64),
    )
