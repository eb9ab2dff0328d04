import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objplace import config as kv
from objplace.diffcore import Rng, Tensor, gradcheck, gradcheck_params
from objplace.diffcore import F
from objplace.dualpath import (
    Batch,
    Discriminator,
    DualPathModel,
    LatentDistribution,
    LatentHead,
    TrainConfig,
    gan_value,
    generator_loss,
    infer,
    load_model,
    loss_kld,
    loss_rec,
    rec_weights,
    sample_placements,
    save_model,
    train_step,
)
from objplace.gcm import TINY
from objplace.geometry import composite

TINY_D = (4, 8, 8, 8)


def tiny_cfg(**kw) -> TrainConfig:
    base = dict(model="tiny", side=16, d_widths=TINY_D, batch_size=2, lr_low=1e-3, lr_high=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def tiny_model(seed=0) -> DualPathModel:
    return DualPathModel(Rng(seed), TINY, TINY_D)


def tiny_batch(seed=0, B=2, n_neg=2) -> Batch:
    r = Rng(seed)
    bg = r.child("bg").uniform(size=(B, 3, 16, 16))
    fg = r.child("fg").uniform(size=(B, 3, 16, 16))
    mask = np.ones((B, 1, 16, 16))
    t = r.child("t").uniform(0.3, 0.7, size=(B, 3))
    ic, mc = composite(bg, fg, mask, t)
    tn = r.child("tn").uniform(0.1, 0.9, size=(n_neg, 3))
    icn, mcn = composite(bg[:1].repeat(n_neg, 0), fg[:1].repeat(n_neg, 0), mask[:1].repeat(n_neg, 0), tn)
    return Batch(bg, fg, mask, ic.data, mc.data, t, icn.data, mcn.data)


# --- discriminator -----------------------------------------------------------
def test_discriminator_range_and_zero_weights():
    d = Discriminator(Rng(0), TINY_D)
    x = Rng(1).uniform(size=(3, 3, 16, 16))
    m = Rng(2).uniform(size=(3, 1, 16, 16))
    p = d(x, m).data
    assert p.shape == (3,) and np.all((p > 0) & (p < 1))
    for prm in d.parameters():
        prm.data[...] = 0.0
    assert np.array_equal(d(x, m).data, np.full(3, 0.5))


def test_discriminator_input_gradcheck():
    d = Discriminator(Rng(0), (2, 3, 3, 3))
    x = Rng(1).uniform(size=(1, 3, 16, 16))
    m = Rng(2).uniform(size=(1, 1, 16, 16))
    rep = gradcheck(lambda a, b: F.tsum(d(a, b)), [x, m])
    assert rep.ok(1e-4), str(rep)


# --- latent path -------------------------------------------------------------
def test_latent_head_starts_at_prior():
    head = LatentHead(Rng(0), 8, 16, 8)
    d = head(Tensor(Rng(1).normal(size=(2, 8, 4, 4))))
    assert d.mu.shape == (2, 8) and d.logvar.shape == (2, 8)
    assert np.array_equal(d.mu.data, np.zeros((2, 8)))
    assert np.array_equal(d.sigma.data, np.ones((2, 8)))
    assert loss_kld(d).item() == 0.0


def test_reparameterised_sample_gradcheck():
    eps = Rng(3).normal(size=(2, 5))
    mu0, lv0 = Rng(4).normal(size=(2, 5)), Rng(5).normal(size=(2, 5)) * 0.3
    w = Rng(6).normal(size=(2, 5))
    rep = gradcheck(lambda mu, lv: F.tsum(LatentDistribution(mu, lv).sample(eps) * w), [mu0, lv0])
    assert rep.ok(1e-4), str(rep)


# --- losses ------------------------------------------------------------------
def test_kld_closed_forms():
    zeros = Tensor(np.zeros((1, 16)))
    assert loss_kld(LatentDistribution(zeros, zeros)).item() == 0.0
    assert loss_kld(LatentDistribution(Tensor(np.ones((1, 16))), zeros)).item() == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_kld_nonnegative(seed):
    r = Rng(seed)
    d = LatentDistribution(Tensor(r.normal(size=(3, 7)) * 3), Tensor(r.normal(size=(3, 7)) * 3))
    assert loss_kld(d).item() >= 0.0


def test_kld_gradcheck():
    mu, lv = Rng(0).normal(size=(2, 4)), Rng(1).normal(size=(2, 4)) * 0.5
    rep = gradcheck(lambda a, b: loss_kld(LatentDistribution(a, b)), [mu, lv])
    assert rep.ok(1e-4), str(rep)


@pytest.mark.parametrize("variant", ["l1_uniform", "l2_uniform", "l2_linear", "l2_trig"])
def test_rec_zero_on_match_and_gradcheck(variant):
    t = Rng(0).uniform(0.05, 0.95, size=(4, 3))
    assert loss_rec(t, t, variant).item() == 0.0
    gt = Rng(1).uniform(0.05, 0.95, size=(4, 3))
    assert loss_rec(t, gt, variant).item() > 0.0
    if variant.endswith("uniform"):
        assert gradcheck(lambda a: loss_rec(a, gt, variant), [t]).ok(1e-4)
    else:
        # weights are detached, so the gradient is the weighted residual
        ts = Tensor(t, requires_grad=True)
        loss_rec(ts, gt, variant).backward()
        w = rec_weights(variant, t[:, 0])
        assert np.allclose(ts.grad, 2 * w * (t - gt) / t.size, atol=1e-14)


def test_rec_trig_limit_example():
    eps = 1e-9
    val = loss_rec(np.array([1 - eps, 0.0, 0.0]), np.array([0.5, 0.3, 0.7]), "l2_trig").item()
    assert val == pytest.approx(0.25 / 3, abs=1e-6)


def test_rec_uniform_is_mse_and_weights():
    a, b = Rng(0).uniform(size=(5, 3)), Rng(1).uniform(size=(5, 3))
    assert loss_rec(a, b, "l2_uniform").item() == pytest.approx(np.mean((a - b) ** 2), abs=1e-15)
    assert loss_rec(a, b, "l1_uniform").item() == pytest.approx(np.mean(np.abs(a - b)), abs=1e-15)
    tr = np.array([0.0, 0.5, 1.0])
    assert np.allclose(rec_weights("l2_linear", tr), [[0, 1, 1], [0.5, 0.5, 0.5], [1, 0, 0]])
    w = rec_weights("l2_trig", tr)
    assert np.allclose(w[:, 0], [0, np.sqrt(0.5), 1]) and np.allclose(w[:, 1], [1, np.sqrt(0.5), 0])


def test_gan_values():
    ones, zeros, half = np.ones(4), np.zeros(4), np.full(4, 0.5)
    assert gan_value(ones, zeros).item() == pytest.approx(0.0, abs=1e-6)
    assert gan_value(half, half).item() == pytest.approx(2 * np.log(0.5), abs=1e-12)
    vals = [generator_loss(np.full(2, p)).item() for p in (0.1, 0.3, 0.6, 0.9)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    sat = [generator_loss(np.full(2, p), saturating=True).item() for p in (0.1, 0.3, 0.6, 0.9)]
    assert all(a > b for a, b in zip(sat, sat[1:]))
    assert np.isfinite(gan_value(zeros, ones).item())  # clamped, not -inf


def test_gan_value_gradcheck():
    p, q = Rng(0).uniform(0.1, 0.9, 5), Rng(1).uniform(0.1, 0.9, 5)
    assert gradcheck(gan_value, [p, q]).ok(1e-4)
    assert gradcheck(lambda a: generator_loss(a), [q]).ok(1e-4)
    assert gradcheck(lambda a: generator_loss(a, True), [q]).ok(1e-4)


# --- model structure and training step --------------------------------------
def test_single_generator_registry_shared_by_both_paths():
    m = tiny_model()
    gcm_params = [p for _, p in m.gcm.named_parameters()]
    assert all(m.g_reg.holds(p) for p in gcm_params)
    assert all(m.g_reg.holds(p) for p in m.latent.parameters())
    assert not any(m.d_reg.holds(p) for p in gcm_params)
    before = {n: p for n, p in m.g_reg.items()}
    train_step(tiny_batch(), m, tiny_cfg(), Rng(0))
    assert all(m.g_reg[n] is p for n, p in before.items())
    assert m.gcm.regressor.fc1.weight is m.g_reg["regressor.fc1.weight"]
    groups = {m.g_reg.group_of(n) for n in m.g_reg.names() if n.startswith("backbone")}
    assert groups == {"low"} and m.g_reg.group_of("regressor.fc1.weight") == "high"


def test_step_updates_every_submodule():
    m = tiny_model()
    snap = {n: p.data.copy() for reg in (m.g_reg, m.d_reg) for n, p in reg.items()}
    train_step(tiny_batch(), m, tiny_cfg(), Rng(0))
    for sub in DualPathModel.SUBMODULES:
        changed = [not np.array_equal(snap[n], p.data) for reg in (m.g_reg, m.d_reg) for n, p in reg.items() if n.startswith(sub + ".")]
        assert changed and any(changed), f"{sub} did not move"


def test_placement_encodings_receive_gradient():
    m = tiny_model()
    cfg = tiny_cfg()
    pk0 = m.gcm.attention.p_k.data.copy()
    pv0 = m.gcm.attention.p_v.data.copy()
    train_step(tiny_batch(), m, cfg, Rng(0))
    assert not np.array_equal(pk0, m.gcm.attention.p_k.data)
    assert not np.array_equal(pv0, m.gcm.attention.p_v.data)


def test_rec_ignored_when_lambda_zero():
    cfg = tiny_cfg(lambda_rec=0.0)
    b1 = tiny_batch()
    b2 = dataclasses.replace(b1, t_gt=np.full_like(b1.t_gt, 0.9))
    m1, m2 = tiny_model(), tiny_model()
    l1 = train_step(b1, m1, cfg, Rng(0))
    l2 = train_step(b2, m2, cfg, Rng(0))
    assert l1.rec != l2.rec
    for (n, p), (_, q) in zip(m1.g_reg.items(), m2.g_reg.items()):
        assert np.array_equal(p.data, q.data), n


def test_step_deterministic_for_ten_steps():
    seqs = []
    for _ in range(2):
        m = tiny_model()
        seqs.append([train_step(tiny_batch(s), m, tiny_cfg(), Rng(9).child(s)).as_tuple() for s in range(10)])
    assert seqs[0] == seqs[1]


def test_loss_toggles_give_distinct_configurations():
    b = tiny_batch()
    variants = {
        "full": tiny_cfg(),
        "no_neg": tiny_cfg(use_negatives=False),
        "u_cls": tiny_cfg(path_s=False),
        "no_kld": tiny_cfg(use_kld=False),
        "no_adv_s": tiny_cfg(use_adv_s=False),
    }
    out = {}
    for k, c in variants.items():
        m = tiny_model()
        train_step(b, m, c, Rng(0))  # KL is exactly 0 on the first step (prior init)
        out[k] = train_step(b, m, c, Rng(1))
    assert out["no_neg"].cls == 0.0 and out["full"].cls < 0.0
    assert out["u_cls"].rec == out["u_cls"].kld == out["u_cls"].adv_s == 0.0
    assert out["no_adv_s"].adv_s == 0.0 and out["no_adv_s"].adv_u > 0.0
    totals = {k: v.total for k, v in out.items()}
    assert len(set(totals.values())) == len(totals)


def test_overfit_drives_rec_down():
    cfg = tiny_cfg(overfit=1, overfit_lr=3e-4)
    b = tiny_batch(B=1)
    m = tiny_model()
    recs = np.array([train_step(b, m, cfg, Rng(0).child(s)).rec for s in range(200)])
    assert recs[-1] < 1e-6
    # monotone down to round-off once the residual is tiny
    assert np.all(np.diff(recs) < 1e-9)


def test_end_to_end_generator_gradcheck():
    """Loss through composite and the whole GCM vs finite differences."""
    m = tiny_model()
    m.gcm.train(False)
    b = tiny_batch(B=1)
    z = Rng(3).normal(size=(1, TINY.C_z))
    w = Rng(4).normal(size=(1, 3, 16, 16))

    def loss():
        ic, mc, t = m.generate(b.bg, b.fg, b.mask, z)
        return F.tsum(ic * w) + F.tsum(t)

    params = [(n, p) for n, p in m.g_reg.items() if n.startswith(("regressor", "attention"))]
    rep = gradcheck_params(loss, params, max_coords=4)
    assert rep.ok(1e-4), str(rep)


# --- inference and checkpoints -----------------------------------------------
def test_infer_reproducible_and_valid():
    m = tiny_model()
    b = tiny_batch()
    bufs = {k: v.copy() for k, v in m.buffers().items()}
    a = infer(m, b.bg[0], b.fg[0], b.mask[0], Rng(5), k=10)
    c = infer(m, b.bg[0], b.fg[0], b.mask[0], Rng(5), k=10)
    assert len(a) == 10
    for (i1, m1, t1), (i2, m2, t2) in zip(a, c):
        assert np.array_equal(i1, i2) and np.array_equal(t1, t2)
        assert i1.shape == (3, 16, 16) and m1.shape == (1, 16, 16)
        assert np.all((t1 > 0) & (t1 < 1))
    assert all(np.array_equal(bufs[k], v) for k, v in m.buffers().items())
    ts = np.array([t for _, _, t in a])
    assert np.abs(ts[0] - ts[1]).sum() > 0


def test_sample_placements_matches_generate():
    m = tiny_model()
    m.train(False)
    b = tiny_batch()
    ts = sample_placements(m, b.bg, b.fg, b.mask, Rng(1), k=3)
    z = Rng(1).normal(size=(2, 3, TINY.C_z))
    for i in range(2):
        for j in range(3):
            _, _, t = m.generate(b.bg[i : i + 1], b.fg[i : i + 1], b.mask[i : i + 1], z[i, j][None])
            assert np.allclose(t.data[0], ts[i, j], atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    m = DualPathModel(Rng(cfg.seed).child("init"), cfg.gcm_config(), cfg.d_widths)
    train_step(tiny_batch(), m, cfg, Rng(0))
    save_model(tmp_path / "a.opck", m, cfg, 1, 1)
    m2, cfg2, meta = load_model(tmp_path / "a.opck", with_optimizer=True)
    assert cfg2 == cfg and meta["epoch"] == 1
    for (n, p), (_, q) in zip(m.g_reg.items(), m2.g_reg.items()):
        assert np.array_equal(p.data, q.data), n
    assert all(np.array_equal(v, m2.buffers()[k]) for k, v in m.buffers().items())
    # training continues identically from the reloaded state
    l1 = train_step(tiny_batch(1), m, cfg, Rng(1))
    l2 = train_step(tiny_batch(1), m2, cfg, Rng(1))
    assert l1 == l2


def test_config_defaults_and_parsing():
    cfg = TrainConfig()
    assert cfg.lambda_rec == 50.0 and (cfg.beta1, cfg.beta2) == (0.5, 0.999)
    assert cfg.lr_high == pytest.approx(10 * cfg.lr_low)
    text = kv.dump(cfg)
    assert "lambda_rec = 50.0" in text
    assert kv.build(TrainConfig, kv.parse_kv_text(text)) == cfg
    c2 = kv.build(TrainConfig, kv.parse_kv_text("n_bg = 2,4\nuse_pk = false\n# note\nrec_variant = l2_linear"))
    assert c2.n_bg == (2, 4) and c2.use_pk is False and c2.gcm_config().n_nodes == 20
    with pytest.raises(kv.ConfigError):
        kv.build(TrainConfig, {"lamda": "3"})
    with pytest.raises(kv.ConfigError):
        kv.build(TrainConfig, {"rec_variant": "l3"})
    with pytest.raises(kv.ConfigError):
        kv.parse_kv_text("a = 1\na = 2")
