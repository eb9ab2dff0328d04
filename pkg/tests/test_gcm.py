import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objplace.diffcore import F, Rng, Tensor, gradcheck, gradcheck_params
from objplace.gcm import (
    DESK,
    GCM,
    PAPER,
    TINY,
    Backbone,
    CrossAttention,
    GCMConfig,
    InvalidGrid,
    NodeHead,
    Regressor,
    attention_argmax,
    node_descriptors,
    preset,
)

VARIANTS = {
    "full": dict(use_pk=True, use_pv=True, share_encodings=False),
    "none": dict(use_pk=False, use_pv=False, share_encodings=False),
    "pk_only": dict(use_pk=True, use_pv=False, share_encodings=False),
    "pv_only": dict(use_pk=False, use_pv=True, share_encodings=False),
    "shared": dict(use_pk=True, use_pv=True, share_encodings=True),
}


def attention_loop_oracle(att: CrossAttention, f_fg: np.ndarray, f_bg: np.ndarray):
    """Scalar loops over heads, nodes and channels for a single sample."""
    C, Hh, d, N = att.C, att.heads, att.d, att.n_nodes
    Wq, Wk, Wv = att.w_q.weight.data, att.w_k.weight.data, att.w_v.weight.data
    concat = np.zeros(C)
    alphas = np.zeros((Hh, N))
    for h in range(Hh):
        cols = range(h * d, (h + 1) * d)
        q = [sum(f_fg[0, c] * Wq[c, o] for c in range(C)) for o in cols]
        logits = []
        keys_vals = []
        for j in range(N):
            k = [sum(f_bg[j, c] * Wk[c, o] for c in range(C)) for o in cols]
            v = [sum(f_bg[j, c] * Wv[c, o] for c in range(C)) for o in cols]
            for e in range(d):
                if att.p_k is not None:
                    k[e] += att.p_k.data[0 if att.p_k.shape[0] == 1 else h, j, e]
                if att.p_v is not None:
                    v[e] += att.p_v.data[0 if att.p_v.shape[0] == 1 else h, j, e]
            logits.append(sum(q[e] * k[e] for e in range(d)) / np.sqrt(d))
            keys_vals.append(v)
        m = max(logits)
        ex = [np.exp(x - m) for x in logits]
        s = sum(ex)
        for j in range(N):
            alphas[h, j] = ex[j] / s
        for e in range(d):
            concat[h * d + e] = sum(alphas[h, j] * keys_vals[j][e] for j in range(N))
    Wo, bo = att.out.weight.data, att.out.bias.data
    x_att = np.array([sum(concat[c] * Wo[c, o] for c in range(C)) + bo[o] for o in range(C)])
    return x_att, alphas


def _random_attention(seed, variant, C=16, heads=8, N=20):
    rng = Rng(seed)
    att = CrossAttention(rng, C, heads, N, **VARIANTS[variant])
    rs = np.random.default_rng(seed)
    # encodings large enough to matter next to the projected features
    for p in (att.p_k, att.p_v):
        if p is not None:
            p.data[...] = rs.normal(size=p.shape)
    att.out.bias.data[...] = rs.normal(size=C)
    return att, rs.normal(size=(2, 1, C)), rs.normal(size=(2, N, C))


# --- backbone --------------------------------------------------------------------

def test_default_backbone_shape():
    cfg = GCMConfig()
    bb = Backbone(Rng(0), cfg.backbone_widths, cfg.pool_depth)
    out = bb(np.zeros((1, 3, 64, 64)), np.zeros((1, 1, 64, 64)))
    assert out.shape == (1, 64, 4, 4)
    bb = Backbone(Rng(0), DESK.backbone_widths, DESK.pool_depth)
    assert bb(np.zeros((1, 3, 64, 64)), np.zeros((1, 1, 64, 64))).shape == (1, 64, 8, 8)


def test_backbone_mask_channel_is_live():
    bb = Backbone(Rng(0), (8, 8), 1)
    rs = np.random.default_rng(0)
    img = rs.uniform(size=(2, 3, 16, 16))
    m1 = rs.uniform(size=(2, 1, 16, 16))
    m2 = rs.uniform(size=(2, 1, 16, 16))
    assert not np.allclose(bb(img, m1).data, bb(img, m2).data)


def test_backbone_zero_input_eval_is_finite():
    bb = Backbone(Rng(0), (8, 8), 2).eval()
    out = bb(np.zeros((1, 3, 16, 16)), np.zeros((1, 1, 16, 16)))
    assert np.all(np.isfinite(out.data))


def test_backbone_shape_errors():
    from objplace.diffcore import ShapeMismatch

    bb = Backbone(Rng(0), (4,), 1)
    with pytest.raises(ShapeMismatch):
        bb(np.zeros((1, 4, 8, 8)), np.zeros((1, 1, 8, 8)))
    with pytest.raises(ShapeMismatch):
        bb(np.zeros((1, 3, 8, 8)), np.zeros((1, 1, 4, 8)))


# --- node extraction ---------------------------------------------------------------

@pytest.mark.parametrize("n,N", [((1,), 1), ((2, 4, 8), 84), ((2, 4), 20)])
def test_node_counts(n, N):
    head = NodeHead(Rng(0), 4, 8, n)
    out = head(Tensor(np.random.default_rng(0).normal(size=(2, 4, 8, 8))))
    assert out.shape == (2, N, 8)
    assert len(node_descriptors(n)) == N


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3))
def test_node_count_identity(n):
    head = NodeHead(Rng(1), 2, 4, tuple(n))
    out = head(Tensor(np.ones((1, 2, 4, 4))))
    assert out.shape[1] == sum(k * k for k in n) == head.n_nodes


def test_node_grid_larger_than_map():
    head = NodeHead(Rng(0), 4, 8, (2, 8))
    with pytest.raises(InvalidGrid):
        head(Tensor(np.zeros((1, 4, 4, 4))))
    with pytest.raises(InvalidGrid):
        GCM(Rng(0), GCMConfig(pool_depth=4))


def test_node_order_is_row_major():
    # pooled cell (r, c) of a single-scale head lands at node r * n + c
    head = NodeHead(Rng(0), 1, 2, (2,))
    fmap = np.zeros((1, 1, 4, 4))
    fmap[0, 0, 0:2, 2:4] = 5.0  # top-right cell
    feats = head(Tensor(fmap)).data[0]
    j = int(np.argmax(np.abs(feats - feats.mean(axis=0)).sum(axis=1)))
    assert node_descriptors((2,))[j] == (0, 2, 0, 1) and j == 1


# --- attention ---------------------------------------------------------------------

@pytest.mark.parametrize("variant", list(VARIANTS))
@pytest.mark.parametrize("seed", range(4))
def test_attention_matches_loop_oracle(variant, seed):
    att, f_fg, f_bg = _random_attention(seed, variant)
    x_att, alphas = att(Tensor(f_fg), Tensor(f_bg))
    for b in range(2):
        x_o, a_o = attention_loop_oracle(att, f_fg[b], f_bg[b])
        np.testing.assert_allclose(x_att.data[b], x_o, atol=1e-10, rtol=0)
        np.testing.assert_allclose(alphas.data[b], a_o, atol=1e-10, rtol=0)


def test_attention_alphas_normalised():
    att, f_fg, f_bg = _random_attention(0, "full", C=32, N=84)
    _, alphas = att(Tensor(f_fg), Tensor(f_bg))
    assert alphas.shape == (2, 8, 84)
    np.testing.assert_allclose(alphas.data.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_uniform_without_query():
    att, f_fg, f_bg = _random_attention(0, "full", C=16, N=84)
    att.w_q.weight.data[...] = 0
    att.p_k.data[...] = 0
    _, alphas = att(Tensor(f_fg), Tensor(f_bg))
    np.testing.assert_allclose(alphas.data, 1 / 84, atol=1e-15)


def test_attention_permutation_covariance():
    att, f_fg, f_bg = _random_attention(3, "full")
    x1, _ = att(Tensor(f_fg), Tensor(f_bg))
    perm = np.random.default_rng(3).permutation(20)
    att.p_k.data[...] = att.p_k.data[:, perm]
    att.p_v.data[...] = att.p_v.data[:, perm]
    x2, _ = att(Tensor(f_fg), Tensor(f_bg[:, perm]))
    np.testing.assert_allclose(x1.data, x2.data, atol=1e-12)


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_attention_gradcheck(variant):
    att, f_fg, f_bg = _random_attention(1, variant, C=16, N=5)
    rep = gradcheck(lambda a, b: att(a, b)[0], [f_fg, f_bg], names=["f_fg", "f_bg"])
    assert rep.ok(1e-4), str(rep)
    proj = np.random.default_rng(0).normal(size=(2, 16))
    rep = gradcheck_params(lambda: (att(Tensor(f_fg), Tensor(f_bg))[0] * proj).sum(), list(att.named_parameters()))
    assert rep.ok(1e-4), str(rep)


def test_ablation_variants_have_distinct_parameters():
    layouts = set()
    for variant, flags in VARIANTS.items():
        att = CrossAttention(Rng(0), 16, 8, 20, **flags)
        layouts.add(tuple((n, p.shape) for n, p in att.named_parameters()))
    assert len(layouts) == len(VARIANTS)


def test_heads_and_head_dim():
    for cfg in (DESK, PAPER):
        assert cfg.heads == 8 and cfg.head_dim * 8 == cfg.C
    att = CrossAttention(Rng(0), 32, 8, 84)
    assert att.d == 4 and att.p_k.shape == (8, 84, 4)


# --- regression --------------------------------------------------------------------

def test_regressor_zero_weights_gives_half():
    reg = Regressor(Rng(0), 8, 4, 16)
    for _, p in reg.named_parameters():
        p.data[...] = 0
    t = reg(np.ones((3, 8)), np.ones((3, 4)))
    np.testing.assert_array_equal(t.data, 0.5)


def test_regressor_range_over_random_parameterisations():
    rs = np.random.default_rng(0)
    x = rs.normal(size=(64, 8))
    z = rs.normal(size=(64, 4))
    lo, hi = 1.0, 0.0
    for i in range(10_000):
        reg = Regressor(Rng(i), 8, 4, 16)
        t = reg(x, z).data
        lo, hi = min(lo, t.min()), max(hi, t.max())
    assert 0.0 < lo and hi < 1.0


def test_regressor_deterministic_and_differentiable():
    reg = Regressor(Rng(0), 8, 4, 16)
    rs = np.random.default_rng(1)
    x, z = rs.normal(size=(2, 8)), rs.normal(size=(2, 4))
    assert np.array_equal(reg(x, z).data, reg(x, z).data)
    assert gradcheck(lambda a, b: reg(a, b), [x, z]).ok(1e-4)
    proj = rs.normal(size=(2, 3))
    assert gradcheck_params(lambda: (reg(x, z) * proj).sum(), list(reg.named_parameters())).ok(1e-4)


# --- whole module ------------------------------------------------------------------

def test_end_to_end_gradient_tiny():
    rs = np.random.default_rng(0)
    model = GCM(Rng(0), TINY)
    bg = rs.uniform(size=(2, 3, 16, 16))
    fg = rs.uniform(size=(2, 3, 16, 16))
    mask = rs.uniform(size=(2, 1, 16, 16))
    z = rs.normal(size=(2, TINY.C_z))
    target = rs.uniform(size=(2, 3))

    def loss():
        return F.mean((model(bg, fg, mask, z) - target) ** 2)

    rep = gradcheck_params(loss, list(model.named_parameters()), max_coords=4)
    assert rep.ok(1e-4), str(rep)
    rep = gradcheck(lambda b, zz: F.mean((model(b, fg, mask, zz) - target) ** 2), [bg, z], names=["bg", "z"])
    assert rep.ok(1e-4), str(rep)


def test_gcm_output_and_config_round_trip():
    model = GCM(Rng(0), TINY)
    rs = np.random.default_rng(0)
    t = model(rs.uniform(size=(3, 3, 16, 16)), rs.uniform(size=(3, 3, 16, 16)), np.ones((3, 1, 16, 16)), rs.normal(size=(3, 8)))
    assert t.shape == (3, 3) and np.all((t.data > 0) & (t.data < 1))
    assert GCMConfig.from_dict(DESK.to_dict()) == DESK
    assert preset("desk", C=64).C == 64
    with pytest.raises(KeyError):
        preset("huge")


def test_desk_model_has_84_nodes():
    model = GCM(Rng(0), DESK)
    assert model.neh_bg.n_nodes == 84 and model.attention.p_k.shape == (8, 84, 16)
    assert model.neh_fg.n_nodes == 1


# --- attention argmax --------------------------------------------------------------

def _one_hot(j, N=84, heads=8):
    a = np.zeros((heads, N))
    a[:, j - 1] = 1.0
    return a


def test_argmax_regions():
    n = (2, 4, 8)
    assert attention_argmax(_one_hot(1), n, 64, 64)[0] == (1, (0, 0, 32, 32))
    assert attention_argmax(_one_hot(5), n, 64, 64)[0] == (5, (0, 0, 16, 16))
    assert attention_argmax(_one_hot(84), n, 64, 64)[0] == (84, (56, 56, 8, 8))
    assert attention_argmax(_one_hot(4), n, 256, 256)[0] == (4, (128, 128, 128, 128))
    assert len(attention_argmax(_one_hot(20), n, 64, 64)) == 8
