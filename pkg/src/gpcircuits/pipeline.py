"""Pipeline stages behind the command-line subcommands.

Every stage reads and writes artifacts under the run's output directory and
records their hashes in ``manifests/<command>.json``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .attribution import (
    ResidualReadout,
    examples_from_stimuli,
    node_scores,
    read_scores_jsonl,
    edge_scores,
    read_edges_jsonl,
    write_scores_jsonl,
)
from .circuits import (
    circuit_iou,
    default_free_sites,
    empirical_random_recall,
    extract_circuit,
    faithfulness,
    faithfulness_sweep,
    feature_recall,
    read_circuit,
    to_dot,
    write_circuit,
)
from .config import RunConfig, config_hash
from .interventions import GroupRule, default_clamp_value, run_intervention, select_groups, write_plan
from .model import LMTrainConfig, MetricSpec, ModelConfig, SubmoduleId, Tokenizer, TransformerModel, all_sites, lm_loss, train_lm
from .numerics.container import companion, load_tensors, save_tensors
from .probe import ActionProbe, ProbeMetric, ProbeTrainConfig, eval_probe, probe_reading, train_probe
from .sae import SaeParams, SaeTrainConfig, collect_activations, splice, train_sae
from .stimuli import (
    CONDITIONS,
    GrammarSpec,
    behavioral_eval,
    format_behavioral,
    generate_corpus,
    generate_stimuli,
    read_corpus,
    read_stimuli_tsv,
    read_treebank,
    select,
    write_corpus,
    write_stimuli_tsv,
    write_treebank,
)

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    pass


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Tracks one subcommand's inputs and outputs and writes its manifest."""

    def __init__(self, command: str, cfg: RunConfig, out: Path, options: dict | None = None):
        self.command = command
        self.cfg = cfg
        self.out = Path(out)
        self.options = dict(options or {})
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []

    def _rel(self, p: Path) -> str:
        try:
            return str(p.resolve().relative_to(self.out.resolve()))
        except ValueError:
            return str(p)

    def need(self, path: str | Path, *suffixes: str) -> Path:
        """Resolve an input artifact; ``suffixes`` lists the files that make it up (e.g. ``.sfct``, ``.json``)."""
        p = Path(path)
        # run-relative names win; anything else is taken relative to the working directory
        parts = lambda q: [companion(q, s) for s in suffixes] if suffixes else [q]
        if not p.is_absolute() and (all(f.exists() for f in parts(self.out / p)) or not all(f.exists() for f in parts(p))):
            p = self.out / p
        files = parts(p)
        for f in files:
            if not f.exists():
                raise MissingArtifact(f"missing artifact: {f}")
            self.inputs[self._rel(f)] = file_hash(f)
        return p

    def output(self, rel: str | Path) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def seeds(self) -> dict:
        c = self.cfg
        return {
            "grammar": c.stimuli.grammar_seed,
            "stimuli": c.stimuli.stimulus_seed,
            "model_init": c.model.init_seed,
            "model_train": c.model.train_seed,
            "sae": c.sae.seed,
            "probe": c.probe.seed,
            "control": c.intervention.control_seed,
        }

    def finish(self) -> Path:
        outs = {}
        for p in sorted(set(self.outputs)):
            for f in sorted(p.parent.glob(p.name + "*")) if not p.exists() else [p]:
                if f.is_file():
                    outs[self._rel(f)] = file_hash(f)
        manifest = {
            "command": self.command,
            "options": self.options,
            "config_hash": config_hash(self.cfg),
            "config": self.cfg.to_dict(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": outs,
            "seeds": self.seeds(),
            "version": __version__,
        }
        path = self.out / "manifests" / f"{self.command}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _tsv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6f}" if math.isfinite(v) else str(v)
        return str(v)

    path.write_text("\t".join(header) + "\n" + "".join("\t".join(fmt(v) for v in r) + "\n" for r in rows))


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------


def sae_sites(cfg: RunConfig) -> list[SubmoduleId]:
    mc = ModelConfig(cfg.model.n_layers, cfg.model.d_model, cfg.model.n_heads, cfg.model.d_mlp)
    if "all" in cfg.sae.sites:
        return all_sites(mc)
    return sorted({SubmoduleId.parse(s) for s in cfg.sae.sites}, key=lambda s: s.order)


def load_model(run: Run, path: str | Path | None = None) -> TransformerModel:
    p = run.need(path or "lm/model", ".sfct", ".json")
    return TransformerModel.load(p)


def load_spliced(run: Run, model: TransformerModel | None = None):
    model = model or load_model(run)
    saes = {}
    for s in sae_sites(run.cfg):
        p = run.need(f"saes/{s.name}", ".sfct", ".json")
        saes[s] = SaeParams.load(p)
    return splice(model, saes)


def load_stimuli(run: Run, model: TransformerModel | None = None, path: str | Path | None = None):
    p = run.need(path or "grammar/stimuli.tsv")
    vocab = model.tokenizer.vocab if model is not None and model.tokenizer else None
    return read_stimuli_tsv(p, vocab)


def _metric(tok: Tokenizer, stim, mode: str) -> MetricSpec:
    return MetricSpec([tok.token_id(stim.gp_token)], [tok.token_id(stim.nongp_token)], mode)


def _dataset(cfg: RunConfig, stimuli, structure: str, tok: Tokenizer, condition: str | None = None, n: int | None = None):
    chosen = select(stimuli, structure, condition or cfg.attribution.condition)
    if not chosen:
        raise ValueError(f"no {structure} stimuli in condition {condition or cfg.attribution.condition}")
    chosen = chosen[: n or cfg.attribution.n_examples]
    return chosen, examples_from_stimuli(chosen, tok)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def gen_grammar(run: Run) -> None:
    st = run.cfg.stimuli
    grammar = GrammarSpec(rng_seed=st.grammar_seed)
    grammar.validate()
    seq = np.random.SeedSequence(st.grammar_seed)
    s_corpus, s_held, s_tree = (int(c.generate_state(1)[0]) for c in seq.spawn(3))
    write_corpus(generate_corpus(grammar, st.corpus_sentences, s_corpus), run.output("grammar/corpus.txt"))
    write_corpus(generate_corpus(grammar, st.heldout_sentences, s_held), run.output("grammar/heldout.txt"))
    write_treebank(generate_corpus(grammar, st.treebank_sentences, s_tree), run.output("grammar/treebank.conll"))
    write_stimuli_tsv(
        generate_stimuli(grammar=grammar, n_per_structure=st.n_per_structure, seed=st.stimulus_seed),
        run.output("grammar/stimuli.tsv"),
    )
    run.output("grammar/vocab.txt").write_text("".join(w + "\n" for w in grammar.words))
    _dump(
        run.output("grammar/grammar.json"),
        {
            "lexicon": grammar.lexicon,
            "rules": {k: [asdict(r) for r in v] for k, v in grammar.rules.items()},
            "start": grammar.start,
        },
    )


def _tokenizer(run: Run) -> Tokenizer:
    words = run.need("grammar/vocab.txt").read_text().split()
    return Tokenizer(words)


def unigram_loss(train: Sequence[Sequence[int]], test: Sequence[Sequence[int]], vocab: int) -> float:
    """Cross-entropy of an add-one unigram model over predicted (non-initial) tokens."""
    counts = np.ones(vocab)
    for s in train:
        np.add.at(counts, np.asarray(s[1:], dtype=np.int64), 1)
    logp = np.log(counts / counts.sum())
    toks = np.concatenate([np.asarray(s[1:], dtype=np.int64) for s in test if len(s) > 1])
    return float(-logp[toks].mean())


def train_lm_stage(run: Run) -> dict:
    m = run.cfg.model
    tok = _tokenizer(run)
    corpus = [tok.encode(s) for s in read_corpus(run.need("grammar/corpus.txt"))]
    held = [tok.encode(s) for s in read_corpus(run.need("grammar/heldout.txt"))]
    mc = ModelConfig(m.n_layers, m.d_model, m.n_heads, m.d_mlp, len(tok), m.max_seq_len, m.init_seed)
    hp = LMTrainConfig(m.steps, m.batch_size, m.lr, m.warmup, m.weight_decay, m.grad_clip, m.train_seed)
    model, history = train_lm(mc, corpus, hp, tok)
    model.save(run.output("lm/model"))
    _dump(run.output("lm/history.json"), history)
    ev = {"heldout_loss": lm_loss(model, held), "unigram_loss": unigram_loss(corpus, held, len(tok))}
    ev["heldout_perplexity"] = math.exp(ev["heldout_loss"])
    ev["unigram_perplexity"] = math.exp(ev["unigram_loss"])
    _dump(run.output("lm/eval.json"), ev)
    return ev


def collect_acts(run: Run) -> None:
    model = load_model(run)
    tok = model.tokenizer
    corpus = [tok.encode(s) for s in read_corpus(run.need("grammar/corpus.txt"))][: run.cfg.sae.n_sentences]
    sites = sae_sites(run.cfg)
    acts = collect_activations(model, corpus, sites)
    for s in sites:
        save_tensors(run.output(f"acts/{s.name}.sfct"), {"acts": acts[s]})


def train_saes(run: Run, sites: Sequence[str] | None = None) -> dict:
    c = run.cfg.sae
    chosen = [SubmoduleId.parse(s) for s in sites] if sites else sae_sites(run.cfg)
    metrics = {}
    for i, s in enumerate(chosen):
        acts = load_tensors(run.need(f"acts/{s.name}.sfct"))["acts"]
        cfg = SaeTrainConfig(c.d_features, c.sparsity_weight, c.lr, c.warmup, c.steps, c.batch_size, c.resample_every, c.seed + i, c.normalize)
        sae, met = train_sae(acts, cfg, s)
        sae.save(run.output(f"saes/{s.name}"))
        metrics[s.name] = {k: v for k, v in met.items() if isinstance(v, (int, float))}
        log.info("sae %s: %s", s.name, metrics[s.name])
    _dump(run.output("saes/metrics.json" if not sites else f"saes/metrics.{'_'.join(x.name for x in chosen)}.json"), metrics)
    return metrics


def behavioral(run: Run, model_path=None, stimuli_path=None) -> str:
    model = load_model(run, model_path)
    stim = load_stimuli(run, model, stimuli_path)
    text = format_behavioral(behavioral_eval(model, stim))
    run.output("behavioral.tsv").write_text(text)
    return text


def attribute(run: Run, method: str | None = None, metric: str | None = None, structures: Sequence[str] | None = None) -> dict:
    a = run.cfg.attribution
    method = method or a.method
    metric = metric or a.metric
    model = load_model(run)
    sp = load_spliced(run, model)
    stim = load_stimuli(run, model)
    tok = model.tokenizer
    written = {}
    if metric == "linear-test":
        # linear readout of the last residual site: every method must agree with exact effects
        site = SubmoduleId.resid(model.config.n_layers - 1)
        head = ResidualReadout.random(site, model.config.d_model, seed=0)
        _, data = _dataset(run.cfg, stim, (structures or a.structures)[0], tok)
        sc = node_scores(sp, head, data, method, a.K, sites=[site], rule=a.rule)
        path = run.output(f"attribution/linear-test.{method}.jsonl")
        write_scores_jsonl(sc, path)
        return {"linear-test": len(sc)}
    for st in structures or a.structures:
        chosen, data = _dataset(run.cfg, stim, st, tok)
        head = _metric(tok, chosen[0], metric)
        sc = node_scores(sp, head, data, method, a.K, rule=a.rule)
        write_scores_jsonl(sc, run.output(f"attribution/{st}.nodes.jsonl"))
        written[st] = len(sc)
        if a.edges:
            kept = [s.coord for s in sc if abs(s.score) >= a.node_threshold]
            resid = [SubmoduleId.embedding()] + [SubmoduleId.resid(l) for l in range(model.config.n_layers)]
            es = []
            emethod = method if method in ("atp", "atp_ig") else "atp"
            for up, down in zip(resid, resid[1:]):
                if up in sp.saes and down in sp.saes:
                    es += edge_scores(sp, head, data, up, down, emethod, a.K, up_nodes=kept, down_nodes=kept, rule=a.rule)
            write_scores_jsonl(es, run.output(f"attribution/{st}.edges.jsonl"))
    return written


def extract_circuits(run: Run, structures: Sequence[str] | None = None) -> dict:
    a = run.cfg.attribution
    mc = load_model(run).config
    free = default_free_sites(mc, run.cfg.circuit.free_sites)
    sizes = {}
    for st in structures or a.structures:
        nodes = read_scores_jsonl(run.need(f"attribution/{st}.nodes.jsonl"))
        epath = run.out / f"attribution/{st}.edges.jsonl"
        edges = read_edges_jsonl(run.need(epath)) if epath.exists() else []
        c = extract_circuit(nodes, edges, a.node_threshold, a.edge_threshold, free, {"structure": st})
        write_circuit(c, run.output(f"circuits/{st}.json"))
        run.output(f"circuits/{st}.dot").write_text(to_dot(c))
        sizes[st] = len(c)
    return sizes


def faithfulness_stage(run: Run, circuit_path: str | None = None, structures: Sequence[str] | None = None) -> dict:
    a = run.cfg.attribution
    model = load_model(run)
    sp = load_spliced(run, model)
    stim = load_stimuli(run, model)
    tok = model.tokenizer
    free = default_free_sites(model.config, run.cfg.circuit.free_sites)
    out = {}
    if circuit_path is not None:
        c = read_circuit(run.need(circuit_path))
        rows = []
        for st in structures or a.structures:
            chosen, data = _dataset(run.cfg, stim, st, tok)
            r = faithfulness(sp, c, data, _metric(tok, chosen[0], a.metric), c.free_sites)
            rows.append((st, len(c), r.faithfulness, len(r.excluded)))
            out[st] = r.faithfulness
        _tsv(run.output(f"faithfulness/{Path(circuit_path).stem}.tsv"), ["structure", "n_nodes", "faithfulness", "excluded"], rows)
        return out
    for st in structures or a.structures:
        chosen, data = _dataset(run.cfg, stim, st, tok)
        head = _metric(tok, chosen[0], a.metric)
        scores = read_scores_jsonl(run.need(f"attribution/{st}.nodes.jsonl"))
        rows = [("full", "", faithfulness(sp, None, data, head, free).faithfulness, 0)]
        rows.append(("empty", 0, faithfulness(sp, extract_circuit([], (), 0.0, 0.0, free), data, head, free).faithfulness, 0))
        for r in faithfulness_sweep(sp, scores, data, head, run.cfg.circuit.sweep, free):
            rows.append((r["threshold"], r["n_nodes"], r["faithfulness"], r["excluded"]))
        _tsv(run.output(f"faithfulness/{st}.tsv"), ["threshold", "n_nodes", "faithfulness", "excluded"], rows)
        out[st] = rows
    return out


def clamp_scales(run: Run, sp, sites: Sequence[SubmoduleId], n_rows: int = 20000) -> dict:
    high = run.cfg.intervention.clamp_high
    if high != "auto":
        return {s: float(high) for s in sites}
    out = {}
    for s in sites:
        acts = load_tensors(run.need(f"acts/{s.name}.sfct"))["acts"][:n_rows]
        out[s] = default_clamp_value(sp.saes[s].encode(acts.astype(np.float64)))
    return out


def intervene(run: Run, structures: Sequence[str] | None = None, n_control_seeds: int | None = None) -> dict:
    iv = run.cfg.intervention
    model = load_model(run)
    sp = load_spliced(run, model)
    stim = load_stimuli(run, model)
    sites = tuple(SubmoduleId.parse(s) for s in iv.sites)
    scale = clamp_scales(run, sp, sites)
    rule = GroupRule(sites, iv.k, iv.min_contrast, iv.method, iv.K, iv.n_examples, iv.verb_group)
    n_ctrl = iv.n_control_seeds if n_control_seeds is None else n_control_seeds
    seeds = list(range(iv.control_seed, iv.control_seed + n_ctrl))
    summary = {}
    for st in structures or list(iv.targets):
        plan = select_groups(sp, stim, st, iv.targets[st], rule, scale)
        plan = type(plan)(plan.groups, iv.control_seed)
        write_plan(plan, run.output(f"interventions/{st}.plan.json"))
        if not plan.groups:
            log.warning("no feature groups found for %s", st)
            summary[st] = {"groups": 0}
            continue
        rep = run_intervention(sp, plan, select(stim, st, "ambiguous"), seeds)
        run.output(f"interventions/{st}.tsv").write_text(rep.format())
        summary[st] = {
            "groups": {g.label: len(g.members) for g in plan.groups},
            "baseline_m": rep.conditions["baseline"].m,
            "intervention_m": rep.conditions["intervention"].m,
            "sign_flipped": bool(np.sign(rep.conditions["baseline"].m) != np.sign(rep.conditions["intervention"].m)),
            "control_ratio": rep.control_ratio() if seeds else None,
            "skipped": len(rep.skipped),
        }
    _dump(run.output("interventions/summary.json"), summary)
    return summary


def _split_treebank(run: Run):
    trees = read_treebank(run.need("grammar/treebank.conll"))
    n = int(round(run.cfg.probe.train_fraction * len(trees)))
    return trees[:n], trees[n:]


def probe_train(run: Run) -> dict:
    p = run.cfg.probe
    model = load_model(run)
    train, _ = _split_treebank(run)
    hist = {}
    for layer in p.layers:
        cfg = ProbeTrainConfig(p.hidden, p.lr, p.steps, p.batch_size, seed=p.seed)
        probe, h = train_probe(model, train, layer, cfg)
        probe.save(run.output(f"probes/{layer}"))
        hist[layer] = h
    _dump(run.output("probes/history.json"), hist)
    return hist


def _load_probes(run: Run) -> list[ActionProbe]:
    return [ActionProbe.load(run.need(f"probes/{layer}", ".sfct", ".json")) for layer in run.cfg.probe.layers]


def probe_eval(run: Run) -> list[dict]:
    model = load_model(run)
    _, test = _split_treebank(run)
    rows = [eval_probe(None, model, test, "oracle"), eval_probe(None, model, test, "random", seed=run.cfg.probe.seed)]
    rows += [eval_probe(pr, model, test) for pr in _load_probes(run)]
    _tsv(
        run.output("probe_eval.tsv"),
        ["policy", "site", "uas", "uuas", "action_accuracy", "parse_failures", "n_sentences"],
        [(r["policy"], r.get("site", "-"), r["uas"], r["uuas"], r.get("action_accuracy", float("nan")), r["parse_failures"], r["n_sentences"]) for r in rows],
    )
    return rows


def probe_reading_stage(run: Run) -> list[tuple]:
    model = load_model(run)
    stim = load_stimuli(run, model)
    probes = _load_probes(run)
    rows = []
    for st in sorted({s.structure for s in stim}):
        for cond in CONDITIONS:
            sub = select(stim, st, cond)
            if not sub:
                continue
            res = probe_reading(model, probes, sub)
            for pr in probes:
                m = res[pr.site.name]["mean"]
                rows.append((st, cond, pr.site.name, len(sub), m["LEFT_ARC"], m["RIGHT_ARC"], m["GEN"]))
    _tsv(run.output("probe_reading.tsv"), ["structure", "condition", "site", "n", "p_left_arc", "p_right_arc", "p_gen"], rows)
    return rows


def compare_circuits(run: Run, draws: int = 1000) -> dict:
    """Circuit overlap across structures, and probe-feature recall against circuit features per probe layer."""
    a, p = run.cfg.attribution, run.cfg.probe
    model = load_model(run)
    sp = load_spliced(run, model)
    stim = load_stimuli(run, model)
    circuits = {st: read_circuit(run.need(f"circuits/{st}.json")) for st in a.structures}
    rows = []
    sts = list(circuits)
    for i in range(len(sts)):
        for j in range(i + 1, len(sts)):
            rows.append(("iou", f"{sts[i]}|{sts[j]}", "all", circuit_iou(circuits[sts[i]], circuits[sts[j]]), float("nan"), 0))
    probes = {pr.site: pr for pr in _load_probes(run)}
    for st, circ in circuits.items():
        chosen, data = _dataset(run.cfg, stim, st, model.tokenizer, n=p.attribution_examples)
        s0 = chosen[0]
        for site, pr in sorted(probes.items(), key=lambda kv: kv[0].order):
            ref = [c for c in circ.nodes if c.site == site]
            if not ref or site not in sp.saes:
                rows.append(("probe_recall", st, site.name, float("nan"), float("nan"), len(ref)))
                continue
            head = ProbeMetric(pr, s0.verb_position, s0.final_noun_position)
            sc = node_scores(sp, head, data, a.method, a.K, sites=[site], rule=a.rule, sum_positions=True)
            ranked = sorted(sc, key=lambda x: (-abs(x.score), x.coord.sort_key()))
            ref_ids = {(c.site, c.feature) for c in ref}
            cand = [x.coord for x in ranked[: len(ref_ids)]]
            universe = [(site, f) for f in range(sp.saes[site].d_features)]
            rec = feature_recall([(s, f) for s, f in sorted(ref_ids, key=lambda k: k[1])], cand)
            rnd = empirical_random_recall(sorted(ref_ids, key=lambda k: k[1]), universe, len(ref_ids), draws, seed=p.seed)
            rows.append(("probe_recall", st, site.name, rec, rnd, len(ref_ids)))
    _tsv(run.output("compare_circuits.tsv"), ["kind", "what", "site", "value", "random_expectation", "n_reference"], rows)
    return {"rows": rows}


def report(run: Run) -> str:
    """Collect every stage's tables into one markdown file."""
    parts = ["# Run report", "", f"config hash `{config_hash(run.cfg)}`", ""]
    sections = [
        ("Language model", "lm/eval.json"),
        ("SAEs", "saes/metrics.json"),
        ("Behavior", "behavioral.tsv"),
        ("Interventions", "interventions/summary.json"),
        ("Probe evaluation", "probe_eval.tsv"),
        ("Probe readings", "probe_reading.tsv"),
        ("Circuit comparison", "compare_circuits.tsv"),
    ]
    sections += [(f"Faithfulness {st}", f"faithfulness/{st}.tsv") for st in run.cfg.attribution.structures]
    for title, rel in sections:
        path = run.out / rel
        if not path.exists():
            continue
        run.need(rel)
        parts += [f"## {title}", "", "```", path.read_text().rstrip(), "```", ""]
    text = "\n".join(parts) + "\n"
    run.output("report.md").write_text(text)
    return text
