import json

import numpy as np
import pytest
import yaml

from gpcircuits.attribution import FeatureCoord, read_scores_jsonl
from gpcircuits.circuits import Circuit, write_circuit
from gpcircuits.cli import main
from gpcircuits.config import ConfigError, RunConfig, config_from_dict, config_hash, dump_config, load_config
from gpcircuits.model import ModelConfig, SubmoduleId, Tokenizer, TransformerModel, init_params
from gpcircuits.pipeline import file_hash
from gpcircuits.stimuli import GrammarSpec, generate_stimuli, write_stimuli_tsv

STAGES = [
    "gen-grammar",
    "train-lm",
    "collect-acts",
    "train-sae",
    "behavioral",
    "attribute",
    "extract-circuit",
    "faithfulness",
    "intervene",
    "probe-train",
    "probe-eval",
    "probe-reading",
    "compare-circuits",
    "report",
]

TINY_RUN = {
    "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_mlp": 32, "steps": 40, "batch_size": 16, "warmup": 5},
    "sae": {"sites": ["resid.0", "resid.1"], "d_features": 48, "steps": 60, "batch_size": 64, "warmup": 5, "resample_every": 30, "n_sentences": 200},
    "stimuli": {"corpus_sentences": 300, "heldout_sentences": 50, "treebank_sentences": 80, "n_per_structure": 4},
    "attribution": {"K": 3, "n_examples": 4, "node_threshold": 0.01},
    "intervention": {"sites": ["resid.0", "resid.1"], "k": 2, "n_examples": 4, "n_control_seeds": 2},
    "probe": {"layers": ["resid.0", "resid.1"], "hidden": 8, "steps": 30, "batch_size": 32, "attribution_examples": 2},
    "circuit": {"sweep": [0.1, 0.01]},
}


def _write_cfg(path, out, **over):
    data = {**TINY_RUN, "output_dir": str(out)}
    for k, v in over.items():
        data[k] = {**data.get(k, {}), **v}
    path.write_text(yaml.safe_dump(data))
    return str(path)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "c.yaml", root / "out")
    for stage in STAGES:
        assert main([stage, "-c", cfg]) == 0, stage
    return root / "out", cfg


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_defaults_are_valid():
    cfg = load_config(None)
    assert cfg.sae.sparsity_weight == 0.1 and cfg.attribution.K == 10
    assert config_hash(cfg) == config_hash(config_from_dict(yaml.safe_load(dump_config(cfg))))


def test_every_error_is_listed():
    bad = {"model": {"n_heads": 3, "lr": "fast", "depth": 2}, "attribution": {"method": "magic"}, "colour": "red"}
    with pytest.raises(ConfigError) as info:
        config_from_dict(bad)
    errs = info.value.errors
    assert "colour: unknown key" in errs
    assert "model.depth: unknown key" in errs
    assert any(e.startswith("model.lr: expected float") for e in errs)
    assert "model.d_model: must be divisible by model.n_heads" in errs
    assert "attribution.method: unknown method 'magic'" in errs
    assert len(errs) == 5


def test_sites_beyond_the_model_rejected():
    with pytest.raises(ConfigError, match="beyond the model"):
        config_from_dict({"model": {"n_layers": 2}})


def test_hash_tracks_content():
    a = RunConfig()
    b = config_from_dict({"attribution": {"K": 11}})
    assert config_hash(a) != config_hash(b)
    assert config_hash(a) == config_hash(RunConfig())


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_config_error_exit_code(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("model: {n_layers: 0}\nbogus: 1\n")
    assert main(["train-lm", "-c", str(tmp_path / "c.yaml")]) == 2
    err = capsys.readouterr().err
    assert "bogus: unknown key" in err and "model.n_layers: must be positive" in err
    (tmp_path / "d.yaml").write_text("model: [\n")
    assert main(["train-lm", "-c", str(tmp_path / "d.yaml")]) == 2
    assert main(["train-lm", "--threads", "0"]) == 2


def test_missing_artifact_exit_code(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.yaml", tmp_path / "out")
    assert main(["train-lm", "-c", cfg]) == 3
    assert "grammar/vocab.txt" in capsys.readouterr().err
    assert main(["train-lm", "-c", str(tmp_path / "nope.yaml")]) == 3


def test_numeric_failure_exit_code(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.yaml", tmp_path / "out", model={"lr": 1e8, "grad_clip": 1e30, "warmup": 1})
    assert main(["gen-grammar", "-c", cfg]) == 0
    with np.errstate(all="ignore"):
        assert main(["train-lm", "-c", cfg]) == 4
    assert "non-finite" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# full tiny run
# ---------------------------------------------------------------------------


def test_manifests_record_hashes(run_dir):
    out, _ = run_dir
    for stage in STAGES:
        man = json.loads((out / "manifests" / f"{stage}.json").read_text())
        assert man["command"] == stage and len(man["config_hash"]) == 64
        assert set(man["seeds"]) >= {"grammar", "model_init", "sae", "probe"}
        for rel, h in man["outputs"].items():
            assert file_hash(out / rel) == h, rel
    man = json.loads((out / "manifests" / "train-lm.json").read_text())
    assert "grammar/corpus.txt" in man["inputs"] and "lm/model.sfct" in man["outputs"]
    assert (out / "report.md").read_text().startswith("# Run report")


def test_linear_readout_atp_equals_exact(run_dir):
    out, cfg = run_dir
    for m in ("atp", "exact"):
        assert main(["attribute", "-c", cfg, "--method", m, "--metric", "linear-test"]) == 0
    atp = read_scores_jsonl(out / "attribution/linear-test.atp.jsonl")
    ex = {s.coord: s.score for s in read_scores_jsonl(out / "attribution/linear-test.exact.jsonl")}
    assert len(atp) == len(ex) > 0
    scale = max(abs(v) for v in ex.values())
    for s in atp:
        assert s.score == pytest.approx(ex[s.coord], abs=1e-10 * max(scale, 1.0))


def test_full_circuit_is_fully_faithful(run_dir, capsys):
    out, cfg = run_dir
    nodes = {FeatureCoord(SubmoduleId.resid(l), f, p): 1.0 for l in (0, 1) for f in range(48) for p in range(16)}
    write_circuit(Circuit(nodes), out / "full.json")
    capsys.readouterr()
    assert main(["faithfulness", "-c", cfg, "--circuit", str(out / "full.json")]) == 0
    lines = [ln.split("\t") for ln in capsys.readouterr().out.splitlines()]
    assert [ln[0] for ln in lines] == ["NPZ", "NPS"]
    for ln in lines:
        assert abs(float(ln[1].split()[1]) - 1.0) < 1e-6


def test_sweep_table_has_endpoints(run_dir):
    out, _ = run_dir
    rows = [ln.split("\t") for ln in (out / "faithfulness/NPZ.tsv").read_text().splitlines()[1:]]
    got = {r[0]: float(r[2]) for r in rows}
    assert abs(got["full"] - 1.0) < 1e-6 and abs(got["empty"]) < 1e-6


def test_behavioral_table_for_uniform_model(tmp_path, capsys):
    tok = Tokenizer(GrammarSpec().words)
    cfg = ModelConfig(1, 8, 2, 16, vocab_size=len(tok), max_seq_len=16, rng_seed=3)
    params = init_params(cfg, np.float64)
    params["W_U"][:] = 0.0
    TransformerModel(cfg, params, tok).save(tmp_path / "uniform")
    write_stimuli_tsv(generate_stimuli(n_per_structure=2), tmp_path / "s.tsv")
    capsys.readouterr()
    rc = main(["behavioral", "--out", str(tmp_path / "run"), "--model", str(tmp_path / "uniform"), "--stimuli", str(tmp_path / "s.tsv")])
    assert rc == 0
    p = f"{1 / len(tok):.6f}"
    want = ["structure\tcondition\tn\tp_gp\tp_nongp\tdiff\tsem"]
    for st in ("NPZ", "NPS", "MVRR"):
        for c in ("ambiguous", "gp", "non_gp"):
            want.append(f"{st}\t{c}\t2\t{p}\t{p}\t0.000000\t0.000000")
    assert capsys.readouterr().out.splitlines() == want
    assert (tmp_path / "run/behavioral.tsv").read_text().splitlines() == want


def test_reruns_are_bit_identical(run_dir, tmp_path):
    out, _ = run_dir
    cfg = _write_cfg(tmp_path / "c.yaml", tmp_path / "again")
    for stage in STAGES[:5]:
        assert main([stage, "-c", cfg]) == 0
    for stage in STAGES[:5]:
        a = json.loads((out / "manifests" / f"{stage}.json").read_text())["outputs"]
        b = json.loads((tmp_path / "again/manifests" / f"{stage}.json").read_text())["outputs"]
        assert a == b, stage


def test_run_directory_wins_over_working_directory(run_dir, tmp_path, monkeypatch, capsys):
    out, cfg = run_dir
    (tmp_path / "lm").mkdir()
    (tmp_path / "lm/model.sfct").write_bytes(b"stale")
    (tmp_path / "lm/model.json").write_text("{}")
    monkeypatch.chdir(tmp_path)
    assert main(["behavioral", "-c", cfg]) == 0
    man = json.loads((out / "manifests/behavioral.json").read_text())
    assert man["inputs"]["lm/model.sfct"] == file_hash(out / "lm/model.sfct")
