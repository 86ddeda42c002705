import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcircuits.model import SubmoduleId
from gpcircuits.probe import (
    Action,
    ActionProbe,
    NonProjectiveTree,
    ParserState,
    ProbeMetric,
    ProbeTrainConfig,
    attaching_action,
    decode,
    eval_probe,
    fit_probe,
    oracle_actions,
    oracle_states,
    probe_forward,
    probe_reading,
    replay,
    state_dataset,
    train_probe,
)
from gpcircuits.stimuli import GrammarSpec, generate_corpus, generate_stimuli, select

G, L, R = Action.GEN, Action.LEFT_ARC, Action.RIGHT_ARC
R0, R1 = SubmoduleId.resid(0), SubmoduleId.resid(1)


@st.composite
def projective_trees(draw, max_n=12):
    """Random projective trees built by recursively splitting spans around a head."""
    n = draw(st.integers(1, max_n))
    heads = [0] * n

    def build(lo, hi, parent):
        if lo > hi:
            return
        h = draw(st.integers(lo, hi))
        heads[h - 1] = parent
        # split the left and right flanks into consecutive dependent subtrees
        for a, b in ((lo, h - 1), (h + 1, hi)):
            while a <= b:
                end = draw(st.integers(a, b))
                build(a, end, h)
                a = end + 1

    build(1, n, 0)
    return heads


def test_single_token_is_one_gen():
    assert oracle_actions([0]) == [G]


def test_two_tokens_second_heads_first():
    # replay the state machine by hand: shift both, then the top (token 2) takes token 1 as dependent
    st_ = ParserState(2)
    for a in (G, G, L):
        st_.apply(a)
    assert st_.finish() == [2, 0]
    assert oracle_actions([2, 0]) == [G, G, L]
    assert oracle_actions([0, 1]) == [G, G, R]


def test_attaching_action_matches_gold_object_attachment():
    """On unambiguous transitive clauses the oracle attaches the object noun to the verb with the attaching action."""
    g = GrammarSpec()
    trans = set(g.lexicon["V_TRANS"])
    seen = 0
    for t in generate_corpus(g, 500, seed=0):
        for state, a in oracle_states(t):
            if len(state.stack) < 2:
                continue
            below, top = state.stack[-2], state.stack[-1]
            if t.tokens[below - 1] in trans and t.heads[top - 1] == below and t.tokens[top - 1] in g.lexicon["N"]:
                assert a == attaching_action()
                seen += 1
    assert seen > 50
    assert attaching_action() == R


def test_treebank_round_trip():
    trees = generate_corpus(GrammarSpec(), 3000, seed=1)
    assert all(replay(len(t), oracle_actions(t)) == t.heads for t in trees)


@settings(max_examples=200)
@given(heads=projective_trees())
def test_oracle_round_trip_random_trees(heads):
    acts = oracle_actions(heads)
    assert replay(len(heads), acts) == heads
    assert acts.count(G) == len(heads) and len(acts) == 2 * len(heads) - 1


def test_non_projective_rejected():
    with pytest.raises(NonProjectiveTree) as info:
        oracle_actions([3, 4, 0, 3])
    assert info.value.pair == ((3, 1), (4, 2))


def test_illegal_actions_rejected():
    s = ParserState(2)
    with pytest.raises(ValueError, match="illegal"):
        s.apply(L)
    s.apply(G)
    s.apply(G)
    with pytest.raises(ValueError, match="illegal"):
        s.apply(G)


@settings(max_examples=100)
@given(n=st.integers(1, 14), seed=st.integers(0, 2**32 - 1))
def test_decoder_only_takes_legal_actions(n, seed):
    rng = np.random.default_rng(seed)
    seen = []

    def choose(state, legal):
        a = legal[rng.integers(len(legal))]
        seen.append((list(state.stack), state.next_token, legal, a))
        return a

    heads, ok = decode(n, choose)
    assert ok
    assert sum(h == 0 for h in heads) == 1
    for _, _, legal, a in seen:
        assert a in legal


# ---------------------------------------------------------------------------
# probe arithmetic
# ---------------------------------------------------------------------------


def _zero_probe(d=6, h=5):
    return ActionProbe(R0, np.zeros((2 * d, h)), np.zeros(h), np.zeros((3, h)), np.zeros(3), np.zeros(d), np.ones(d))


def test_zero_probe_is_uniform():
    p = probe_forward(_zero_probe(), np.ones((4, 6)), -np.ones((4, 6)))
    np.testing.assert_allclose(p, 1 / 3, atol=1e-15)


def test_bias_dominance():
    pr = _zero_probe()
    pr.b[:] = [40.0, -40.0, -40.0]
    p = probe_forward(pr, np.zeros(6), np.zeros(6))
    assert p[0] > 1 - 1e-15 and p[1] < 1e-30


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_distribution_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    pr = ActionProbe.init(R0, 6, 16, seed)
    pr.b[:] = rng.normal(size=3)
    p = probe_forward(pr, 5 * rng.normal(size=(7, 6)), 5 * rng.normal(size=(7, 6)))
    assert (p >= 0).all() and np.abs(p.sum(-1) - 1).max() < 1e-9


def test_site_and_shape_mismatch_rejected():
    pr = ActionProbe.init(R0, 6, 8)
    with pytest.raises(ValueError, match="resid.1"):
        probe_forward(pr, np.zeros(6), np.zeros(6), site=R1)
    with pytest.raises(ValueError, match="expected"):
        probe_forward(pr, np.zeros(6), np.zeros(5))


def test_probe_save_load(tmp_path):
    pr = ActionProbe.init(R1, 6, 8, seed=3)
    pr.save(tmp_path / "resid.1")
    back = ActionProbe.load(tmp_path / "resid.1")
    assert back.site == R1 and back.digest() == pr.digest()


# ---------------------------------------------------------------------------
# training and evaluation on the toy model
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def treebank(grammar):
    return generate_corpus(grammar, 600, seed=21)


def test_state_dataset_shapes(trained_small, treebank):
    feats, y, mask = state_dataset(trained_small, treebank[:20], [R0, R1])
    n = len(y)
    assert n > 0 and mask.shape == (n, 3)
    assert mask[np.arange(n), y].all()
    for s in (R0, R1):
        assert feats[s][0].shape == feats[s][1].shape == (n, trained_small.config.d_model)


def test_one_repeated_tree_is_memorized(trained_small, treebank):
    tree = max(treebank[:50], key=len)
    probe, hist = train_probe(trained_small, [tree] * 20, R1, ProbeTrainConfig(hidden=32, steps=300, lr=1e-2, warmup=10))
    res = eval_probe(probe, trained_small, [tree])
    assert res["action_accuracy"] == 1.0 and res["uas"] == 1.0
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_oracle_policy_is_perfect(trained_small, treebank):
    res = eval_probe(None, trained_small, treebank, policy="oracle")
    assert res["uas"] == 1.0 and res["uuas"] == 1.0 and res["parse_failures"] == 0


def test_trained_probe_beats_random_policy(trained_small, treebank):
    probe, _ = train_probe(trained_small, treebank[:500], R1, ProbeTrainConfig(hidden=64, steps=600, lr=3e-3))
    res = eval_probe(probe, trained_small, treebank[500:])
    rnd = eval_probe(None, trained_small, treebank[500:], policy="random", seed=0)
    assert res["uas"] > rnd["uas"] and res["action_accuracy"] > 0.8
    with pytest.raises(ValueError):
        eval_probe(None, trained_small, treebank, policy="probe")


def test_probe_metric_matches_forward(trained_small, grammar):
    stims = select(generate_stimuli(grammar=grammar, n_per_structure=3, structures=["NPZ"]), "NPZ")
    pr = ActionProbe.init(R1, trained_small.config.d_model, 16, seed=2)
    pr.b[:] = [0.3, -0.2, 0.1]
    reading = probe_reading(trained_small, [pr], stims)["resid.1"]
    assert reading["probs"].shape == (len(stims), 3)
    s = stims[0]
    ids = trained_small.tokenizer.encode(s.tokens)
    metric = ProbeMetric(pr, s.verb_position, s.final_noun_position)
    m = float(trained_small.run([ids], head=metric).metric[0])
    p = reading["probs"][0]
    assert m == pytest.approx(p[int(attaching_action())] - p[int(G)], abs=1e-12)
    assert sum(reading["mean"].values()) == pytest.approx(1.0)


def test_fit_probe_validates():
    with pytest.raises(ValueError):
        fit_probe(R0, np.zeros((0, 4)), np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError, match="hidden"):
        ProbeTrainConfig(hidden=0).check()
