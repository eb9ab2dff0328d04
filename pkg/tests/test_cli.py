import time

import numpy as np
import pytest

from objplace import cli
from objplace.dualpath import load_model
from objplace.geometry import bbox_from_mask, tgt_from_bbox
from objplace.imagefile import read_mask, read_params_record

TINY_SET = ["model=tiny", "side=16", "d_widths=4,8,8,8", "batch_size=4", "probe_scenes=2"]


def _set(*extra):
    out = []
    for kv in list(TINY_SET) + list(extra):
        out += ["--set", kv]
    return out


@pytest.fixture(scope="module")
def data16(tmp_path_factory):
    d = tmp_path_factory.mktemp("d16")
    assert cli.main(["synth-gen", "--scenes", "6", "--pos", "2", "--neg", "2", "--side", "16",
                     "--test-scenes", "3", "--seed", "1", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(data16, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--data", str(data16), "--out", str(out), "--epochs", "2", "--quiet"] + _set()) == 0
    return out


def test_synth_gen_reproducible_and_fast(tmp_path, capsys):
    t0 = time.perf_counter()
    assert cli.main(["synth-gen", "--scenes", "1", "--test-scenes", "0", "--out", str(tmp_path / "a")]) == 0
    assert time.perf_counter() - t0 < 5.0
    cli.main(["synth-gen", "--scenes", "1", "--test-scenes", "0", "--out", str(tmp_path / "b")])
    digests = [l.split()[-1] for l in capsys.readouterr().out.splitlines() if "sha256" in l]
    assert len(digests) == 2 and digests[0] == digests[1]


def test_synth_gen_defaults():
    args = cli.build_parser().parse_args(["synth-gen", "--out", "x"])
    assert (args.scenes, args.pos, args.neg, args.side) == (500, 2, 4, 64)


def test_train_outputs_and_resolved_config(trained):
    cfg_text = (trained / "config.txt").read_text()
    assert "lambda_rec = 50.0" in cfg_text and "beta1 = 0.5" in cfg_text and "beta2 = 0.999" in cfg_text
    rows = (trained / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,step,adv_u") and len(rows) == 3
    assert (trained / "ckpt_epoch001.opck").exists() and (trained / "last.opck").exists()
    model, cfg, meta = load_model(trained / "last.opck")
    assert meta["epoch"] == 2 and cfg.model == "tiny"


def test_train_ten_steps_byte_identical(data16, tmp_path):
    for name in ("a", "b"):
        assert cli.main(["train", "--data", str(data16), "--out", str(tmp_path / name), "--max-steps", "10",
                         "--epochs", "20", "--quiet"] + _set()) == 0
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b and a.count(b"\n") >= 2
    assert (tmp_path / "a" / "last.opck").read_bytes() == (tmp_path / "b" / "last.opck").read_bytes()


def test_resume_matches_uninterrupted(data16, trained, tmp_path):
    out = tmp_path / "r"
    assert cli.main(["train", "--data", str(data16), "--out", str(out), "--epochs", "1", "--quiet"] + _set()) == 0
    assert cli.main(["train", "--data", str(data16), "--out", str(out), "--epochs", "2", "--resume", "--quiet"] + _set()) == 0
    assert (out / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
    assert (out / "last.opck").read_bytes() == (trained / "last.opck").read_bytes()


def test_overfit_flag(data16, tmp_path):
    out = tmp_path / "o"
    assert cli.main(["train", "--data", str(data16), "--out", str(out), "--overfit", "1", "--epochs", "300",
                     "--quiet"] + _set("overfit_lr=3e-4")) == 0
    last = (out / "metrics.csv").read_text().splitlines()[-1].split(",")
    assert float(last[5]) < 1e-3  # rec column
    # an overfit epoch is one step, so only the final checkpoint is kept
    assert [p.name for p in out.glob("*.opck")] == ["last.opck"]


def test_config_errors_exit_1(data16, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("lamda = 3\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(data16), "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["train", "--data", str(data16), "--out", str(tmp_path / "x"), "--set", "nope"]) == 1
    assert cli.main(["place"]) == 1
    assert cli.main(["frobnicate"]) == 1


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("seed = 3\nepochs = 4\nlambda_rec = 10\n")
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--data", "d", "--out", "o",
                                          "--set", "lambda_rec=20", "--seed", "7"])
    c = cli.train_config(args)
    assert (c.seed, c.epochs, c.lambda_rec) == (7, 4, 20.0)


def test_data_errors_exit_2(trained, tmp_path):
    assert cli.main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["place", "--ckpt", str(tmp_path / "none.opck"), "--bg", "a.png", "--fg", "b.png",
                     "--mask", "c.png", "--out", str(tmp_path / "p")]) == 2
    bad = tmp_path / "bad.opck"
    bad.write_bytes(b"garbage")
    assert cli.main(["eval", "--ckpt", str(bad), "--data", str(tmp_path)]) == 2


def _scene_files(data16):
    d = data16 / "test" / "scene_00000"
    return ["--bg", str(d / "bg.png"), "--fg", str(d / "fg.png"), "--mask", str(d / "mask.png")]


def test_place_reproducible_and_round_trips(data16, trained, tmp_path):
    ck = str(trained / "last.opck")
    for name in ("a", "b"):
        assert cli.main(["place", "--ckpt", ck, "--k", "10", "--seed", "4", "--out", str(tmp_path / name)]
                        + _scene_files(data16)) == 0
    for i in range(10):
        for stem in (f"comp_{i:02d}.png", f"mask_{i:02d}.png", f"t_{i:02d}.txt"):
            assert (tmp_path / "a" / stem).read_bytes() == (tmp_path / "b" / stem).read_bytes()
    checked = 0
    for i in range(10):
        t = read_params_record(tmp_path / "a" / f"t_{i:02d}.txt")
        m = read_mask(tmp_path / "a" / f"mask_{i:02d}.png")
        if m.max() < 0.5 or t.t_r > 0.75:
            continue
        rec = tgt_from_bbox(bbox_from_mask(m), 16, 16)
        assert np.allclose(rec.as_array(), t.as_array(), atol=1.5 / (16 * (1 - t.t_r)) + 2 / 16)
        checked += 1
    assert checked > 0


def test_place_uses_output_root(data16, trained, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.main(["place", "--ckpt", str(trained / "last.opck"), "--k", "2", "--out", "rel"]
                    + _scene_files(data16)) == 0
    assert (tmp_path / "rel" / "comp_01.png").exists()


def test_eval_appends_row(data16, trained, tmp_path, capsys):
    log = tmp_path / "m.csv"
    for _ in range(2):
        assert cli.main(["eval", "--ckpt", str(trained / "last.opck"), "--data", str(data16), "--k", "10",
                         "--log", str(log), "--report", str(tmp_path / "r.csv")]) == 0
    lines = log.read_text().splitlines()
    assert lines[0] == "accuracy,frechet,diversity,n_samples,k_per_sample"
    assert len(lines) == 3 and lines[1] == lines[2]
    acc, fd, div, n, k = lines[1].split(",")
    assert 0 <= float(acc) <= 1 and float(fd) >= 0 and float(div) >= 0 and (n, k) == ("3", "10")


def test_gradcheck_exit_codes(monkeypatch, capsys):
    assert cli.main(["gradcheck"]) == 0
    from objplace.diffcore import tensor

    orig = tensor.tanh

    def broken_tanh(a):
        out = orig(a)
        bw = out._backward
        if bw is not None:
            out._backward = lambda g: tuple(x * 1.1 for x in bw(g))
        return out

    monkeypatch.setattr(tensor, "tanh", broken_tanh)
    assert cli.main(["gradcheck"]) == 3
    assert "FAIL tanh" in capsys.readouterr().out


def test_viz_attn_draws_eight_regions(data16, trained, tmp_path):
    out = tmp_path / "viz.png"
    assert cli.main(["viz-attn", "--ckpt", str(trained / "last.opck"), "--out", str(out)] + _scene_files(data16)) == 0
    lines = out.with_suffix(".txt").read_text().splitlines()
    assert len(lines) == 8 and all(l.startswith(f"head {i + 1} ") for i, l in enumerate(lines))
    from PIL import Image

    with Image.open(out) as im:
        assert im.size == (64, 64)
