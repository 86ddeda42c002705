import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gpcircuits.model import ActivationEdit, SubmoduleId
from gpcircuits.sae import SaeParams, SaeTrainConfig, SaeTrainingDiverged, splice, train_sae

from conftest import TINY, random_sae, splice_all


def planted_data(n=60000, d=64, n_features=256, k=5, seed=0):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(d, n_features))
    D /= np.linalg.norm(D, axis=0)
    S = np.zeros((n, n_features))
    rows = np.repeat(np.arange(n), k)
    cols = np.concatenate([rng.choice(n_features, k, replace=False) for _ in range(n)])
    S[rows, cols] = rng.uniform(0.5, 1.5, n * k)
    return S @ D.T + 0.5 * rng.normal(size=d), D


def test_encode_bias_centered_input_is_zero():
    sae = random_sae(8, 12, seed=0)
    sae.b_e[:] = 0.0
    assert np.array_equal(sae.encode(sae.b_d[None].astype(np.float64)), np.zeros((1, 12)))


def test_encode_identity_slice_is_relu():
    d = 6
    sae = SaeParams(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))
    x = np.array([[0.7, -1.0, 0.0, 2.5, -0.1, 0.3]])
    np.testing.assert_array_equal(sae.encode(x), np.maximum(x, 0))


def test_encode_decode_match_straight_line_formulas():
    sae = random_sae(10, 30, seed=3)
    x = np.random.default_rng(1).normal(size=(7, 10))
    f_ref = np.maximum((x - sae.b_d) @ sae.W_e.T + sae.b_e, 0)
    assert np.abs(sae.encode(x) - f_ref).max() < 1e-12
    assert np.abs(sae.decode(f_ref) - (f_ref @ sae.W_d.T + sae.b_d)).max() < 1e-12


def test_decode_zero_and_one_hot():
    sae = random_sae(10, 30, seed=3)
    np.testing.assert_array_equal(sae.decode(np.zeros((1, 30))), sae.b_d[None])
    f = np.zeros((1, 30))
    f[0, 7] = 2.5
    assert np.abs(sae.decode(f)[0] - (2.5 * sae.W_d[:, 7] + sae.b_d)).max() < 1e-14


def test_shape_errors():
    sae = random_sae(10, 30)
    with pytest.raises(ValueError, match="d_model"):
        sae.encode(np.zeros((2, 9)))
    with pytest.raises(ValueError, match="d_features"):
        sae.decode(np.zeros((2, 29)))
    with pytest.raises(ValueError, match="inconsistent"):
        SaeParams(np.zeros((4, 3)), np.zeros(4), np.zeros((3, 5)), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(x=hnp.arrays(np.float64, (3, 10), elements=st.floats(-10, 10)))
def test_codes_are_nonnegative(x):
    assert (random_sae(10, 30, seed=4).encode(x) >= 0).all()


@settings(max_examples=50, deadline=None)
@given(
    f1=hnp.arrays(np.float64, (2, 30), elements=st.floats(0, 5)),
    f2=hnp.arrays(np.float64, (2, 30), elements=st.floats(0, 5)),
)
def test_decode_is_affine(f1, f2):
    sae = random_sae(10, 30, seed=5)
    z = sae.decode(np.zeros_like(f1))
    gap = sae.decode(f1 + f2) - sae.decode(f1) - sae.decode(f2) + z
    assert np.abs(gap).max() < 1e-12


def test_save_load_round_trip(tmp_path):
    sae = random_sae(10, 30, seed=6, site=SubmoduleId.resid(1))
    sae.save(tmp_path / "resid.1")
    back = SaeParams.load(tmp_path / "resid.1")
    assert back.site == sae.site
    for k in ("W_e", "b_e", "W_d", "b_d"):
        assert np.array_equal(getattr(back, k), getattr(sae, k))


def test_unregularized_square_autoencoder_reconstructs():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20000, 16)) @ rng.normal(size=(16, 16)) + 1.0
    cfg = SaeTrainConfig(d_features=16, sparsity_weight=0.0, steps=4000, batch_size=256, lr=3e-3, warmup=100, resample_every=0)
    sae, m = train_sae(X, cfg)
    assert m["variance_explained"] > 0.99
    norms = np.linalg.norm(sae.W_d, axis=0)
    assert np.all(np.isfinite(norms)) and np.all(norms > 0)


def test_planted_dictionary_recovery():
    X, D = planted_data()
    sae, _ = train_sae(X, SaeTrainConfig(d_features=256, sparsity_weight=0.1, steps=4000, batch_size=512, warmup=100))
    W = sae.W_d / np.linalg.norm(sae.W_d, axis=0)
    assert (D.T @ W).max(axis=1).mean() > 0.9


def test_sparsity_sweep_does_not_increase_l0():
    X, _ = planted_data(n=20000, d=32, n_features=64, k=4, seed=1)
    l0 = []
    for lam in (0.03, 0.1, 0.3):
        _, m = train_sae(X, SaeTrainConfig(d_features=64, sparsity_weight=lam, steps=1500, batch_size=256, warmup=50))
        l0.append(m["l0"])
    assert l0[0] >= l0[1] >= l0[2]


def test_undercomplete_rejected():
    with pytest.raises(ValueError, match="overcomplete"):
        train_sae(np.zeros((10, 8)), SaeTrainConfig(d_features=4))


def test_divergence_is_reported():
    X = np.full((64, 4), np.nan)
    with pytest.raises(SaeTrainingDiverged):
        train_sae(X, SaeTrainConfig(d_features=8, steps=5, batch_size=16))


# ---------------------------------------------------------------------------
# splicing
# ---------------------------------------------------------------------------


def test_splice_identity(tiny_model):
    sp = splice_all(tiny_model, d_features=24, seed=1)
    toks = np.array([[3, 1, 4, 1, 5, 9]])
    assert np.abs(sp.forward(toks) - tiny_model.forward(toks)[0]).max() < 1e-12


def test_zeroing_every_feature_leaves_bias_plus_error(tiny_model):
    site = SubmoduleId.resid(0)
    sae = random_sae(TINY.d_model, 24, seed=2, site=site, active=0.5)
    sp = splice(tiny_model, [sae])
    toks = np.array([[3, 1, 4, 1]])
    ctx = sp.clean_context(toks)
    x = ctx.inputs["clean.resid.0.x"]
    eps = x - ctx.inputs["clean.resid.0.xhat"]
    edits = [ActivationEdit(site, "all", feature=f, value=0.0) for f in range(24)]
    ov = tiny_model.edits_to_overrides(edits, 4, sp.saes)
    out = sp.run(toks, overrides=ov).act("resid.0")
    assert np.abs(out - (sae.b_d + eps)).max() < 1e-12


def test_zeroing_one_feature_subtracts_its_column(tiny_model):
    site = SubmoduleId.resid(1)
    sae = random_sae(TINY.d_model, 24, seed=3, site=site, active=0.5)
    sp = splice(tiny_model, [sae])
    toks = np.array([[2, 7, 1, 8]])
    f = sp.features(toks)[site]
    pos, j = map(int, np.argwhere(f[0] > 0)[0])
    ov = tiny_model.edits_to_overrides([ActivationEdit(site, pos, feature=j, value=0.0)], 4, sp.saes)
    clean = sp.run(toks).act("resid.1")
    edited = sp.run(toks, overrides=ov).act("resid.1")
    expected = clean.copy()
    expected[0, pos] -= f[0, pos, j] * sae.W_d[:, j]
    assert np.abs(edited - expected).max() < 1e-12


def test_splice_rejects_duplicates_and_width_mismatch(tiny_model):
    site = SubmoduleId.resid(0)
    with pytest.raises(ValueError, match="two SAEs"):
        splice(tiny_model, [random_sae(TINY.d_model, 20, site=site), random_sae(TINY.d_model, 20, site=site)])
    with pytest.raises(ValueError, match="d_model"):
        splice(tiny_model, [random_sae(TINY.d_model + 1, 20, site=site)])
    with pytest.raises(ValueError, match="no site"):
        splice(tiny_model, [random_sae(TINY.d_model, 20)])
