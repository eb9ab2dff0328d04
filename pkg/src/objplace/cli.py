"""Command-line entry point: ``objplace <command> ...``.

Exit codes: 0 success, 1 usage or config error, 2 data error (missing or
malformed files), 3 tolerance failure (gradcheck).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import config as kvconfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TOLERANCE = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "OBJPLACE_OUTPUT_ROOT"
HEAD_COLOURS = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
]


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def out_path(p: str | Path) -> Path:
    """Relative output paths are placed under $OBJPLACE_OUTPUT_ROOT when set."""
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _load_inputs(args, side: int):
    from .geometry import preprocess_pair
    from .imagefile import read_mask, read_png

    try:
        bg = read_png(args.bg, "RGB")
        fg = read_png(args.fg, "RGB")
        mask = read_mask(args.mask)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read input image: {e}") from e
    if fg.shape[1:] != mask.shape[1:]:
        raise DataError(f"foreground {fg.shape[1:]} and mask {mask.shape[1:]} differ in size")
    fg, mask, bg = preprocess_pair(fg, mask, bg, side)
    return bg, fg, mask


def _load_ckpt(path):
    from .diffcore import CheckpointError
    from .dualpath import load_model

    try:
        return load_model(path)
    except (OSError, CheckpointError, KeyError, ValueError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from e


# --- commands ----------------------------------------------------------------
def cmd_synth_gen(args) -> int:
    from .synthdata import manifest_digest, write_dataset

    out = out_path(args.out)
    manifest = write_dataset(out, args.seed, args.scenes, args.pos, args.neg, args.side, args.test_scenes)
    print(f"wrote {out} ({args.scenes} train scenes, {args.test_scenes} test scenes)")
    print(f"manifest sha256 {manifest_digest(out / 'manifest.json')}")
    return EXIT_OK


def train_config(args):
    from .dualpath import TrainConfig

    values = {}
    if args.config:
        try:
            values.update(kvconfig.parse_kv_text(Path(args.config).read_text(), args.config))
        except OSError as e:
            raise DataError(f"cannot read config: {e}") from e
    values.update(kvconfig.parse_overrides(args.set))
    # dedicated flags win over the file and --set
    for key in ("seed", "epochs", "overfit", "max_steps"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    return kvconfig.build(TrainConfig, values)


def cmd_train(args) -> int:
    from .dualpath import train

    cfg = train_config(args)
    data = Path(args.data)
    if not (data / "manifest.json").exists():
        raise DataError(f"{data}: not a synthetic dataset (no manifest.json)")
    out = out_path(args.out)
    log = None if args.quiet else (lambda s: print(s, flush=True))
    train(cfg, data, out, resume=args.resume, log=log)
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_place(args) -> int:
    from .diffcore import Rng
    from .dualpath import infer
    from .geometry import TransformParams
    from .imagefile import write_params_record, write_png

    model, cfg, _ = _load_ckpt(args.ckpt)
    bg, fg, mask = _load_inputs(args, model.cfg.side)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = infer(model, bg, fg, mask, Rng(args.seed).child("place"), args.k)
    for i, (ic, mc, t) in enumerate(results):
        write_png(out / f"comp_{i:02d}.png", ic)
        write_png(out / f"mask_{i:02d}.png", mc)
        write_params_record(out / f"t_{i:02d}.txt", TransformParams(*t))
    (out / "config.txt").write_text(f"ckpt = {args.ckpt}\nk = {args.k}\nseed = {args.seed}\n")
    print(f"wrote {args.k} placements to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .diffcore import Rng
    from .eval import MetricReport, evaluate
    from .synthdata import load_split

    model, cfg, _ = _load_ckpt(args.ckpt)
    try:
        split = load_split(args.data, args.split, limit=args.limit)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load {args.split} split of {args.data}: {e}") from e
    if not split.specs:
        raise DataError(f"{args.data}: {args.split} split is empty")
    report = evaluate(model, split, Rng(args.seed).child("eval"), k=args.k)
    print(MetricReport.header())
    print(report.csv_row())
    log = out_path(args.log) if args.log else Path(args.ckpt).parent / "eval.csv"
    new = not log.exists()
    with open(log, "a") as fh:
        if new:
            fh.write(MetricReport.header() + "\n")
        fh.write(report.csv_row() + "\n")
    if args.report:
        rp = out_path(args.report)
        rp.write_text(MetricReport.header() + "\n" + report.csv_row() + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(args.seed)
    bad = 0
    for r in results:
        ok = r.ok(args.tol)
        bad += not ok
        print(f"{'PASS' if ok else 'FAIL'} {r.name:28s} max rel err {r.worst:.3e}")
    print(f"{len(results) - bad}/{len(results)} within {args.tol:g}")
    return EXIT_OK if bad == 0 else EXIT_TOLERANCE


def cmd_viz_attn(args) -> int:
    from PIL import Image, ImageDraw

    from .diffcore import Rng, no_grad
    from .gcm import attention_argmax
    from .geometry import composite
    from .imagefile import to_uint8

    model, cfg, _ = _load_ckpt(args.ckpt)
    bg, fg, mask = _load_inputs(args, model.cfg.side)
    model.train(False)
    with no_grad():
        x_att, alphas = model.gcm.attend(bg[None], fg[None], mask[None])
        z = Rng(args.seed).child("viz").normal(size=(1, model.cfg.C_z))
        t = model.gcm.regressor(x_att, z)
        ic, _ = composite(bg[None], fg[None], mask[None], t)
    H, W = bg.shape[1:]
    regions = attention_argmax(alphas.data[0], model.cfg.n_bg, H, W)
    scale = max(1, args.scale)
    im = Image.fromarray(to_uint8(ic.data[0].transpose(1, 2, 0))).resize((W * scale, H * scale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    lines = []
    for h, (j, (x, y, w, hh)) in enumerate(regions):
        draw.rectangle([x * scale, y * scale, (x + w) * scale - 1, (y + hh) * scale - 1], outline=HEAD_COLOURS[h % 8], width=1)
        lines.append(f"head {h + 1} node {j} x {x} y {y} w {w} h {hh}")
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    im.save(out)
    out.with_suffix(".txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {out} with {len(regions)} head regions")
    return EXIT_OK


# --- parser ------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="objplace", description="Object placement by graph completion (desk scale).")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-gen", help="generate the synthetic placement dataset")
    s.add_argument("--scenes", type=int, default=500)
    s.add_argument("--pos", type=int, default=2)
    s.add_argument("--neg", type=int, default=4)
    s.add_argument("--test-scenes", type=int, default=100)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("train", help="train the dual-path model")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--max-steps", dest="max_steps", type=int)
    s.add_argument("--overfit", type=int, help="1: fit a single positive sample on the supervised path")
    s.add_argument("--resume", action="store_true", help="continue from OUT/last.opck")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    for name, fn, hlp in (("place", cmd_place, "sample k placements"), ("viz-attn", cmd_viz_attn, "draw per-head attention")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--bg", required=True)
        s.add_argument("--fg", required=True)
        s.add_argument("--mask", required=True)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", required=True)
        if name == "place":
            s.add_argument("--k", type=int, default=10)
        else:
            s.add_argument("--scale", type=int, default=4, help="upscaling of the output image")
        s.set_defaults(func=fn)

    s = sub.add_parser("eval", help="accuracy, Frechet distance and diversity on held-out scenes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--limit", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log", help="metrics CSV to append to (default: eval.csv next to the checkpoint)")
    s.add_argument("--report", help="also write a standalone report file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable block")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    from .diffcore import CheckpointError
    from .geometry import EmptyMask
    from .synthdata import SamplingExhausted

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "k", 1) is not None and getattr(args, "k", 1) < 1:
            raise UsageError("--k must be >= 1")
        return args.func(args)
    except (UsageError, kvconfig.ConfigError) as e:
        print(f"objplace: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, EmptyMask, SamplingExhausted, FileNotFoundError) as e:
        print(f"objplace: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
