from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcircuits.model import ModelConfig, Tokenizer, TransformerModel, init_params
from gpcircuits.stimuli import (
    CONDITIONS,
    VERB_CLASSES,
    DepTree,
    GardenPathTemplate,
    GrammarSpec,
    Stimulus,
    behavioral_eval,
    generate_corpus,
    generate_stimuli,
    make_templates,
    observed_class_shares,
    read_stimuli_tsv,
    read_treebank,
    select,
    sem,
    write_stimuli_tsv,
    write_treebank,
)


def is_projective(heads):
    arcs = [(min(h, d), max(h, d)) for d, h in enumerate(heads, start=1) if h]
    for a, b in arcs:
        for c, e in arcs:
            if a < c < b < e:
                return False
    return True


def test_empty_corpus():
    assert generate_corpus(GrammarSpec(), 0, seed=1) == []


def test_corpus_is_deterministic():
    a = generate_corpus(GrammarSpec(), 200, seed=4)
    b = generate_corpus(GrammarSpec(), 200, seed=4)
    assert [(t.tokens, t.heads) for t in a] == [(t.tokens, t.heads) for t in b]


def test_trees_are_projective_and_single_rooted():
    for t in generate_corpus(GrammarSpec(), 2000, seed=2):
        t.validate()
        assert is_projective(t.heads)
        assert len(t) <= 16


def test_corpus_covers_both_readings():
    texts = [" ".join(t.tokens) for t in generate_corpus(GrammarSpec(), 3000, seed=0)]
    g = GrammarSpec()
    subs, ambi = set(g.lexicon["SUB"]), set(g.lexicon["V_AMBI"])
    # "SUB the N V_AMBI ," and "SUB the N V_AMBI the N ,"
    intrans = obj = 0
    for t in texts:
        w = t.split()
        if w[0] in subs and w[3] in ambi:
            intrans += w[4] == ","
            obj += w[4] == "the"
    assert intrans > 0 and obj > 0


@lru_cache(maxsize=None)
def _expected(grammar_id, sym):
    g = _GRAMMARS[grammar_id]
    if sym in g.lexicon:
        return {sym: 1.0}
    out = {}
    for r in g.rules[sym]:
        for child in r.rhs:
            for k, v in _expected(grammar_id, child).items():
                out[k] = out.get(k, 0.0) + r.prob * v
    return out


_GRAMMARS = {0: GrammarSpec()}


def test_verb_class_frequencies_follow_production_probabilities():
    exp = _expected(0, "S")
    tot = sum(exp[c] for c in VERB_CLASSES)
    obs = observed_class_shares(generate_corpus(_GRAMMARS[0], 100_000, seed=7), _GRAMMARS[0])
    for c in VERB_CLASSES:
        target = exp[c] / tot
        assert abs(obs[c] - target) <= 0.1 * target, c


def test_invalid_grammar_rejected():
    g = GrammarSpec()
    g.rules = dict(g.rules)
    g.rules["NP"] = [g.rules["NP"][0].__class__(("DET", "N"), 0.5, 1)]
    with pytest.raises(ValueError, match="sum"):
        g.validate()


# ---------------------------------------------------------------------------
# templates and stimuli
# ---------------------------------------------------------------------------


def test_npz_template_instantiation():
    t = GardenPathTemplate("NPZ", ("after", "the", "senator", "{V}", "the", "bill"), ("attacked", "rejected", "arrived"), ",", "was")
    amb, gp, ng = t.instantiate()
    assert amb.text == "after the senator attacked the bill"
    assert gp.text == "after the senator rejected the bill"
    assert ng.text == "after the senator arrived the bill"
    assert (amb.condition, gp.condition, ng.condition) == CONDITIONS
    assert amb.gp_token == "," and amb.nongp_token == "was"
    assert amb.verb_position == 3 and amb.final_noun_position == 5


def test_nps_uses_period():
    stims = generate_stimuli(n_per_structure=3, structures=["NPS"])
    assert {s.gp_token for s in stims} == {"."} and {s.nongp_token for s in stims} == {"was"}


def test_unequal_verb_lengths_rejected():
    with pytest.raises(ValueError, match="unequal"):
        GardenPathTemplate("NPZ", ("after", "the", "man", "{V}", "the", "dog"), ("played", "took up", "slept"), ",", "was")


def test_identical_continuations_rejected():
    with pytest.raises(ValueError):
        GardenPathTemplate("NPZ", ("after", "{V}"), ("played", "took", "slept"), ",", ",")


def test_stimulus_positions_checked():
    with pytest.raises(ValueError):
        Stimulus(("a", "b"), "NPZ", "gp", 2, 1, ",", "was")


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 8))
def test_condition_triples_differ_only_at_the_verb(seed, n):
    g = GrammarSpec()
    stims = generate_stimuli(grammar=g, n_per_structure=n, seed=seed)
    classes = {"NPZ": ("V_AMBI", "V_TRANS", "V_INTR"), "NPS": ("V_NPS", "V_TRANS", "V_SONLY"), "MVRR": ("V_MVAMB", "V_TRANS", "V_PART")}
    for i in range(0, len(stims), 3):
        triple = stims[i : i + 3]
        assert len({len(s.tokens) for s in triple}) == 1
        v = triple[0].verb_position
        for s in triple:
            assert s.tokens[:v] + s.tokens[v + 1 :] == triple[0].tokens[:v] + triple[0].tokens[v + 1 :]
        for s, cls in zip(triple, classes[triple[0].structure]):
            assert g.word_class(s.tokens[v]) == cls


def test_stimuli_deterministic_and_counted():
    a = generate_stimuli(n_per_structure=24, seed=3)
    assert a == generate_stimuli(n_per_structure=24, seed=3)
    for st_ in ("NPZ", "NPS", "MVRR"):
        for c in CONDITIONS:
            assert len(select(a, st_, c)) == 24


def test_too_many_templates_rejected():
    with pytest.raises(ValueError, match="distinct"):
        make_templates(GrammarSpec(lexicon={**GrammarSpec().lexicon, "N": ["dog", "cat"], "SUB": ["after"]}), 500, ["NPZ"])


def test_tsv_round_trip(tmp_path, tokenizer):
    stims = generate_stimuli(n_per_structure=4)
    write_stimuli_tsv(stims, tmp_path / "s.tsv")
    assert read_stimuli_tsv(tmp_path / "s.tsv", tokenizer.vocab) == stims


def test_tsv_unknown_token_rejected(tmp_path):
    stims = generate_stimuli(n_per_structure=1, structures=["NPZ"])
    write_stimuli_tsv(stims, tmp_path / "s.tsv")
    with pytest.raises(KeyError):
        read_stimuli_tsv(tmp_path / "s.tsv", vocab=["the"])


def test_treebank_round_trip(tmp_path):
    trees = generate_corpus(GrammarSpec(), 30, seed=1)
    write_treebank(trees, tmp_path / "t.conll")
    back = read_treebank(tmp_path / "t.conll")
    assert [(t.tokens, t.heads) for t in back] == [(t.tokens, t.heads) for t in trees]


def test_dep_tree_validation():
    with pytest.raises(ValueError, match="root"):
        DepTree(["a", "b"], [0, 0]).validate()
    with pytest.raises(ValueError, match="cycle"):
        DepTree(["a", "b", "c"], [0, 3, 2]).validate()


# ---------------------------------------------------------------------------
# behavioral evaluation
# ---------------------------------------------------------------------------


def test_sem_uses_population_std():
    assert sem([1.0, 3.0]) == pytest.approx(1.0 / np.sqrt(2))


def test_duplicated_data_shrinks_sem_by_root_two():
    x = np.random.default_rng(0).normal(size=9)
    assert sem(np.concatenate([x, x])) == pytest.approx(sem(x) / np.sqrt(2), rel=1e-12)


def _uniform_model(tok):
    cfg = ModelConfig(1, 16, 2, 32, vocab_size=len(tok), max_seq_len=16, rng_seed=0)
    p = init_params(cfg, np.float64)
    p["W_U"][:] = 0.0
    return TransformerModel(cfg, p, tok)


def test_uniform_model_has_zero_difference(tokenizer):
    stims = generate_stimuli(n_per_structure=3)
    rows = behavioral_eval(_uniform_model(tokenizer), stims)
    assert len(rows) == 9
    for r in rows:
        assert r.diff == 0.0 and r.sem == 0.0 and r.p_gp == pytest.approx(1 / len(tokenizer))


def test_duplicated_stimuli_keep_means(trained_small):
    stims = generate_stimuli(n_per_structure=4, structures=["NPZ"])
    a = behavioral_eval(trained_small, stims)
    b = behavioral_eval(trained_small, stims + stims)
    for x, y in zip(a, b):
        assert y.n == 2 * x.n
        assert y.diff == pytest.approx(x.diff, abs=1e-15)
        assert y.sem == pytest.approx(x.sem / np.sqrt(2), rel=1e-9)


def test_unknown_word_rejected(trained_small):
    bad = Stimulus(("after", "the", "zebra"), "NPZ", "gp", 0, 2, ",", "was")
    with pytest.raises(KeyError):
        behavioral_eval(trained_small, [bad])


def test_trained_model_orders_conditions(trained_small):
    rows = {(r.structure, r.condition): r.diff for r in behavioral_eval(trained_small, generate_stimuli(n_per_structure=24))}
    for st_ in ("NPZ", "NPS"):
        assert rows[(st_, "gp")] > rows[(st_, "ambiguous")] > rows[(st_, "non_gp")]


def test_tokenizer_round_trip(tokenizer):
    text = "after the senator attacked the bill , the man was happy ."
    assert tokenizer.decode(tokenizer.encode(text)) == text
    with pytest.raises(KeyError):
        tokenizer.encode("the zebra")
