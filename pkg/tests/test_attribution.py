import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcircuits.attribution import (
    Example,
    FeatureCoord,
    FeatureMetric,
    ResidualReadout,
    atp,
    atp_ig,
    edge_scores,
    exact_ie,
    node_scores,
    read_edges_jsonl,
    read_scores_jsonl,
    score_matrix,
    write_scores_jsonl,
)
from gpcircuits.model import MetricSpec, SubmoduleId, TransformerModel
from gpcircuits.sae import splice

from conftest import TINY, random_sae, scaled_model, splice_all

R0, R1 = SubmoduleId.resid(0), SubmoduleId.resid(1)
TOKS = (3, 1, 4, 1, 5, 9)


def _constant_feature_sae(site, d_model, n_features, which, value, seed=0):
    """Random SAE in which feature ``which`` equals ``value`` at every position."""
    sae = random_sae(d_model, n_features, seed=seed, site=site)
    sae.W_e[which] = 0.0
    sae.b_e[which] = value
    return sae


def test_inactive_feature_scores_zero(tiny_spliced):
    site = R1
    f = tiny_spliced.features(np.array([TOKS]))[site][0]
    pos, j = map(int, np.argwhere(f == 0)[0])
    coord = FeatureCoord(site, j, pos)
    metric = MetricSpec([2], [7])
    assert exact_ie(tiny_spliced, metric, coord, TOKS) == 0.0
    assert atp(tiny_spliced, metric, coord, TOKS) == 0.0
    assert atp_ig(tiny_spliced, metric, coord, TOKS) == 0.0


@pytest.mark.parametrize("value", [0.37, 1.0, 2.5])
def test_linear_metric_all_methods_agree(tiny_model, value):
    sae = _constant_feature_sae(R1, TINY.d_model, 20, 4, value)
    sp = splice(tiny_model, [sae])
    metric = FeatureMetric(R1, 4, 2, coef=-1.7)
    coord = FeatureCoord(R1, 4, 2)
    want = -1.7 * value
    assert abs(exact_ie(sp, metric, coord, TOKS) - want) < 1e-10
    assert abs(atp(sp, metric, coord, TOKS) - want) < 1e-10
    assert abs(atp_ig(sp, metric, coord, TOKS, K=3, rule="trapezoid") - want) < 1e-10
    # K+1 equal weights of 1/K overshoot a constant gradient by (K+1)/K
    assert abs(atp_ig(sp, metric, coord, TOKS, K=10) - 1.1 * want) < 1e-10


def test_quadratic_metric_literal_and_trapezoid(tiny_model):
    sae = _constant_feature_sae(R0, TINY.d_model, 20, 7, 1.0)
    sp = splice(tiny_model, [sae])
    metric = FeatureMetric(R0, 7, 1, power=2)
    coord = FeatureCoord(R0, 7, 1)
    assert abs(exact_ie(sp, metric, coord, TOKS) - 1.0) < 1e-12
    assert abs(atp(sp, metric, coord, TOKS) - 2.0) < 1e-12
    assert abs(atp_ig(sp, metric, coord, TOKS, K=10) - 1.1) < 1e-10
    assert abs(atp_ig(sp, metric, coord, TOKS, K=10, rule="trapezoid") - 1.0) < 1e-10
    assert abs(atp_ig(sp, metric, coord, TOKS, K=1) - 2.0) < 1e-10


def test_nonzero_baseline(tiny_model):
    sae = _constant_feature_sae(R0, TINY.d_model, 20, 7, 1.0)
    sp = splice(tiny_model, [sae])
    metric = FeatureMetric(R0, 7, 1, power=2)
    coord = FeatureCoord(R0, 7, 1)
    # (1 - 0.5) * (1/4) * sum_k 2 * (0.5 + k/8) for k = 0..4
    want = 0.5 * 0.25 * sum(2 * (0.5 + k / 8) for k in range(5))
    assert abs(atp_ig(sp, metric, coord, TOKS, K=4, baseline=0.5) - want) < 1e-10


def test_readout_makes_node_scores_method_independent(tiny_spliced):
    metric = ResidualReadout.random(R1, TINY.d_model, seed=3)
    data = [TOKS, (2, 2, 7, 1, 0, 3)]
    by = {m: score_matrix(node_scores(tiny_spliced, metric, data, m, K=4, sites=[R1], keep_zero=True)) for m in ("exact", "atp", "atp_ig")}
    by["trapezoid"] = score_matrix(node_scores(tiny_spliced, metric, data, "atp_ig", K=4, sites=[R1], keep_zero=True, rule="trapezoid"))
    assert set(by["exact"]) == set(by["atp"]) == set(by["atp_ig"]) == set(by["trapezoid"])
    for c, v in by["exact"].items():
        assert abs(by["atp"][c] - v) < 1e-10
        assert abs(by["trapezoid"][c] - v) < 1e-10
        assert abs(by["atp_ig"][c] - 1.25 * v) < 1e-10
    assert any(v != 0 for v in by["exact"].values())


def test_coord_validation(tiny_spliced):
    metric = MetricSpec([2], [7])
    with pytest.raises(ValueError, match="out of range"):
        exact_ie(tiny_spliced, metric, FeatureCoord(R0, 10_000, 0), TOKS)
    with pytest.raises(ValueError, match="out of range"):
        atp(tiny_spliced, metric, FeatureCoord(R0, 0, 40), TOKS)
    with pytest.raises(ValueError, match="K"):
        atp_ig(tiny_spliced, metric, FeatureCoord(R0, 0, 0), TOKS, K=0)
    sp = splice(tiny_spliced.model, [random_sae(TINY.d_model, 8, site=R0)])
    with pytest.raises(ValueError, match="no SAE"):
        atp(sp, metric, FeatureCoord(R1, 0, 0), TOKS)


# ---------------------------------------------------------------------------
# dataset-level scores
# ---------------------------------------------------------------------------


def test_single_example_dataset_matches_single_op(tiny_spliced):
    metric = MetricSpec([2], [7])
    scores = score_matrix(node_scores(tiny_spliced, metric, [TOKS], "exact", positions=[2], sites=[R0]))
    f = tiny_spliced.features(np.array([TOKS]))[R0][0, 2]
    for j in np.flatnonzero(f)[:5]:
        c = FeatureCoord(R0, int(j), 2)
        assert scores.get(c, 0.0) == pytest.approx(exact_ie(tiny_spliced, metric, c, TOKS), abs=1e-14)


@pytest.mark.parametrize("method", ["exact", "atp", "atp_ig"])
def test_duplicated_example_matches_singleton(tiny_spliced, method):
    metric = MetricSpec([2], [7])
    a = score_matrix(node_scores(tiny_spliced, metric, [TOKS], method, K=3, sites=[R0, R1]))
    b = score_matrix(node_scores(tiny_spliced, metric, [TOKS, TOKS], method, K=3, sites=[R0, R1]))
    assert set(a) == set(b)
    for c in a:
        assert b[c] == pytest.approx(a[c], abs=1e-14)


@settings(max_examples=10, deadline=None)
@given(perm=st.permutations(range(4)))
def test_node_scores_are_permutation_invariant(perm):
    sp = splice_all(scaled_model(TINY, seed=1), d_features=16, sites=[R1])
    data = [(1, 2, 3, 4), (4, 4, 0, 1), (7, 1, 1, 9), (0, 5, 6, 2)]
    metric = MetricSpec([3], [5])
    a = score_matrix(node_scores(sp, metric, data, "atp", positions="all"))
    b = score_matrix(node_scores(sp, metric, [data[i] for i in perm], "atp", positions="all"))
    assert set(a) == set(b)
    for c in a:
        assert b[c] == pytest.approx(a[c], abs=1e-15)


def test_scores_sorted_descending_with_coordinate_tiebreak(tiny_spliced):
    scores = node_scores(tiny_spliced, MetricSpec([2], [7]), [TOKS], "atp", keep_zero=True, sites=[R0])
    keys = [(-s.score, s.coord.sort_key()) for s in scores]
    assert keys == sorted(keys)
    assert all(s.method == "atp" and s.n_examples == 1 for s in scores)


def test_misaligned_dataset_needs_selectors(tiny_spliced):
    data = [Example((1, 2, 3, 4), {"verb": 1}), Example((1, 2, 3, 4, 5), {"verb": 2})]
    with pytest.raises(ValueError, match="aligned"):
        node_scores(tiny_spliced, MetricSpec([2], [7]), data, "atp", positions="all")
    scores = node_scores(tiny_spliced, MetricSpec([2], [7]), data, "atp", positions=["verb"])
    assert scores and {s.coord.position for s in scores} == {"verb"}


def test_sum_positions_view(tiny_spliced):
    metric = MetricSpec([2], [7])
    per = node_scores(tiny_spliced, metric, [TOKS], "atp", sites=[R0], keep_zero=True)
    summed = score_matrix(node_scores(tiny_spliced, metric, [TOKS], "atp", sites=[R0], sum_positions=True, keep_zero=True))
    tot = {}
    for s in per:
        tot[s.coord.feature] = tot.get(s.coord.feature, 0.0) + s.score
    for f, v in tot.items():
        assert summed[FeatureCoord(R0, f, "sum")] == pytest.approx(v, abs=1e-14)


def test_unknown_method_rejected(tiny_spliced):
    with pytest.raises(ValueError, match="method"):
        node_scores(tiny_spliced, MetricSpec([2], [7]), [TOKS], "ig")


def test_scores_jsonl_round_trip(tmp_path, tiny_spliced):
    scores = node_scores(tiny_spliced, MetricSpec([2], [7]), [TOKS], "atp", sites=[R0])
    write_scores_jsonl(scores, tmp_path / "s.jsonl")
    assert read_scores_jsonl(tmp_path / "s.jsonl") == scores


# ---------------------------------------------------------------------------
# edges
# ---------------------------------------------------------------------------


def _chain_model():
    """Layer 1 is an identity map, so resid.1 == resid.0 and one resid.1 feature reads 2x a resid.0 feature."""
    model = scaled_model(TINY, seed=8)
    p = dict(model.params)
    for k in ("blocks.1.attn.W_O", "blocks.1.attn.b_O", "blocks.1.mlp.W_out", "blocks.1.mlp.b_out"):
        p[k] = np.zeros_like(p[k])
    model = TransformerModel(TINY, p)
    up = random_sae(TINY.d_model, 12, seed=1, site=R0, active=0.6)
    down = random_sae(TINY.d_model, 10, seed=2, site=R1)
    down.W_e[5] = 2.0 * up.W_d[:, 3]
    down.b_e[5] = 50.0  # keep the downstream feature in its linear regime
    return model, up, down


def test_edge_linear_chain():
    model, up, down = _chain_model()
    sp = splice(model, [up, down])
    toks = (1, 4, 2, 2, 7)
    a_u = sp.features(np.array([toks]))[R0][0, :, 3]
    assert a_u[2] > 0 and a_u[4] == 0
    metric = FeatureMetric(R1, 5, 2, coef=3.0)
    edges = {(e.src, e.dst): e.score for e in edge_scores(sp, metric, [toks], R0, R1)}
    assert edges[(FeatureCoord(R0, 3, 2), FeatureCoord(R1, 5, 2))] == pytest.approx(6.0 * a_u[2], rel=1e-10)
    assert not any(src == FeatureCoord(R0, 3, 4) for src, _ in edges)


def test_inactive_upstream_has_no_edges(tiny_spliced):
    toks = np.array([TOKS])
    f = tiny_spliced.features(toks)[R0][0]
    dead = {(int(p), int(j)) for p, j in np.argwhere(f == 0)}
    for e in edge_scores(tiny_spliced, MetricSpec([2], [7]), [TOKS], R0, R1):
        assert (e.src.position, e.src.feature) not in dead


def test_edges_out_of_a_node_sum_to_its_atp_score(tiny_spliced):
    metric = ResidualReadout.random(R1, TINY.d_model, seed=5)
    data = [TOKS, (2, 2, 7, 1, 0, 3)]
    node = score_matrix(node_scores(tiny_spliced, metric, data, "atp", sites=[R0]))
    out: dict = {}
    for e in edge_scores(tiny_spliced, metric, data, R0, R1):
        out[e.src] = out.get(e.src, 0.0) + e.score
    assert node
    for c, v in node.items():
        assert out.get(c, 0.0) == pytest.approx(v, abs=1e-10)


def test_ig_edges_reduce_to_linear_edges_on_linear_chain():
    model, up, down = _chain_model()
    sp = splice(model, [up, down])
    toks = (1, 4, 2, 2, 7)
    metric = FeatureMetric(R1, 5, 2, coef=3.0)
    nodes = [FeatureCoord(R0, 3, p) for p in range(5)]
    lin = {(e.src, e.dst): e.score for e in edge_scores(sp, metric, [toks], R0, R1, up_nodes=nodes)}
    ig = {(e.src, e.dst): e.score for e in edge_scores(sp, metric, [toks], R0, R1, "atp_ig", K=4, up_nodes=nodes)}
    # the literal rule carries a (K+1)/K factor when the gradient is constant along the path
    assert set(lin) == set(ig)
    for k in lin:
        assert ig[k] == pytest.approx(lin[k] * 5 / 4, rel=1e-9)


def test_non_causal_pair_rejected(tiny_spliced):
    with pytest.raises(ValueError, match="strictly before"):
        edge_scores(tiny_spliced, MetricSpec([2], [7]), [TOKS], R1, R0)
    with pytest.raises(ValueError, match="strictly before"):
        edge_scores(tiny_spliced, MetricSpec([2], [7]), [TOKS], R1, R1)


def test_edges_jsonl_round_trip(tmp_path, tiny_spliced):
    edges = edge_scores(tiny_spliced, MetricSpec([2], [7]), [TOKS], R0, R1)
    write_scores_jsonl(edges, tmp_path / "e.jsonl")
    assert read_edges_jsonl(tmp_path / "e.jsonl") == edges
    with pytest.raises(ValueError, match="edge"):
        read_scores_jsonl(tmp_path / "e.jsonl")
