from statistics import NormalDist

import numpy as np
import pytest

from gpcircuits.model import ModelConfig, SubmoduleId, Tokenizer, TransformerModel, param_shapes
from gpcircuits.sae import SaeParams, splice
from gpcircuits.stimuli import GrammarSpec


def scaled_model(cfg: ModelConfig, seed: int = 0, scale: float = 0.3, tokenizer=None) -> TransformerModel:
    """Random float64 model with weights large enough that every nonlinearity is exercised."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = 1.0 + 0.1 * rng.normal(size=shape)
        elif leaf.startswith("b"):
            params[name] = 0.1 * rng.normal(size=shape)
        else:
            params[name] = rng.normal(0.0, scale, size=shape)
    return TransformerModel(cfg, params, tokenizer)


def random_sae(d_model: int, d_features: int, seed: int = 0, site=None, active: float = 0.3) -> SaeParams:
    """Random SAE whose encoder bias leaves roughly ``active`` of the codes positive on unit-scale inputs."""
    rng = np.random.default_rng(seed)
    W_e = rng.normal(size=(d_features, d_model)) / np.sqrt(d_model)
    b_e = np.full(d_features, NormalDist().inv_cdf(active))
    W_d = rng.normal(size=(d_model, d_features))
    W_d /= np.linalg.norm(W_d, axis=0, keepdims=True)
    return SaeParams(W_e, b_e, W_d, 0.05 * rng.normal(size=d_model), site)


TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_mlp=32, vocab_size=12, max_seq_len=8, rng_seed=0)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return scaled_model(TINY, seed=1)


def splice_all(model, d_features=24, seed=0, active=0.3, sites=None):
    from gpcircuits.model import all_sites

    sites = sites or all_sites(model.config)
    return splice(model, {s: random_sae(model.config.d_model, d_features, seed + i, s, active) for i, s in enumerate(sites)})


@pytest.fixture
def tiny_spliced(tiny_model):
    return splice_all(tiny_model)


@pytest.fixture(scope="session")
def grammar():
    return GrammarSpec()


@pytest.fixture(scope="session")
def tokenizer(grammar):
    return Tokenizer(grammar.words)


@pytest.fixture(scope="session")
def trained_small(grammar, tokenizer):
    """A small LM trained briefly on the synthetic grammar (shared across test modules)."""
    from gpcircuits.model import LMTrainConfig, train_lm
    from gpcircuits.stimuli import generate_corpus

    corpus = [tokenizer.encode(t.tokens) for t in generate_corpus(grammar, 3000, seed=3)]
    cfg = ModelConfig(n_layers=2, d_model=48, n_heads=2, d_mlp=96, vocab_size=len(tokenizer), max_seq_len=16, rng_seed=0)
    model, _ = train_lm(cfg, corpus, LMTrainConfig(steps=250, batch_size=32, lr=3e-3, warmup=20, log_every=50), tokenizer)
    return model


SITES = {
    "embed": SubmoduleId.embedding(),
    "resid0": SubmoduleId.resid(0),
    "resid1": SubmoduleId.resid(1),
}


@pytest.fixture(scope="session")
def small_spliced(trained_small, grammar, tokenizer):
    """``trained_small`` with briefly trained SAEs on resid.0 and resid.1."""
    from gpcircuits.sae import SaeTrainConfig, collect_activations, train_sae
    from gpcircuits.stimuli import generate_corpus

    corpus = [tokenizer.encode(t.tokens) for t in generate_corpus(grammar, 1500, seed=11)]
    sites = [SITES["resid0"], SITES["resid1"]]
    acts = collect_activations(trained_small, corpus, sites)
    cfgs = [SaeTrainConfig(d_features=192, steps=800, batch_size=256, warmup=50, rng_seed=i) for i in range(2)]
    return splice(trained_small, [train_sae(acts[s], c, s)[0] for s, c in zip(sites, cfgs)])


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
