"""Feature circuits: threshold extraction, faithfulness under ablation, overlap metrics, activation stats."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attribution import AttributionScore, EdgeScore, Example, FeatureCoord, _as_examples, _groups
from .model import ActivationEdit, ModelConfig, SubmoduleId, resolve_position
from .numerics import Override
from .sae import SplicedModel


def default_free_sites(config: ModelConfig, rule: str = "embed_layer0") -> list[SubmoduleId]:
    """Sites never ablated in faithfulness runs.

    ``embed_layer0``: the embedding plus every layer-0 site.
    ``quarter``: the embedding plus every site in the first ceil(n_layers / 4) layers.
    """
    if rule == "embed_layer0":
        n = 1
    elif rule == "quarter":
        n = math.ceil(config.n_layers / 4)
    elif rule == "none":
        return []
    else:
        raise ValueError(f"unknown free-site rule {rule!r}")
    out = [SubmoduleId.embedding()]
    for l in range(min(n, config.n_layers)):
        out += [SubmoduleId.attn(l), SubmoduleId.mlp(l), SubmoduleId.resid(l)]
    return out


@dataclass
class Circuit:
    nodes: dict[FeatureCoord, float] = field(default_factory=dict)
    edges: dict[tuple[FeatureCoord, FeatureCoord], float] = field(default_factory=dict)
    node_threshold: float = 0.0
    edge_threshold: float = 0.0
    free_sites: list[SubmoduleId] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.nodes)

    def check(self) -> None:
        free = set(self.free_sites)
        for c, s in self.nodes.items():
            if abs(s) < self.node_threshold and c.site not in free:
                raise ValueError(f"node {c} below threshold")
        for u, d in self.edges:
            if u not in self.nodes or d not in self.nodes:
                raise ValueError(f"edge {u} -> {d} has an endpoint outside the circuit")

    def sorted_nodes(self) -> list[tuple[FeatureCoord, float]]:
        return sorted(self.nodes.items(), key=lambda kv: kv[0].sort_key())

    def feature_set(self, use_position: bool = False) -> set:
        if use_position:
            return set(self.nodes)
        return {(c.site, c.feature) for c in self.nodes}

    def to_dict(self) -> dict:
        return {
            "metadata": {
                **self.provenance,
                "node_threshold": self.node_threshold,
                "edge_threshold": self.edge_threshold,
                "free_sites": [s.name for s in sorted(self.free_sites, key=lambda s: s.order)],
            },
            "nodes": [{**c.to_dict(), "score": s} for c, s in self.sorted_nodes()],
            "edges": [
                {"src": u.to_dict(), "dst": d.to_dict(), "score": s}
                for (u, d), s in sorted(self.edges.items(), key=lambda kv: (kv[0][0].sort_key(), kv[0][1].sort_key()))
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Circuit":
        meta = dict(d.get("metadata", {}))
        nt = float(meta.pop("node_threshold", 0.0))
        et = float(meta.pop("edge_threshold", 0.0))
        free = [SubmoduleId.parse(n) for n in meta.pop("free_sites", [])]
        nodes = {FeatureCoord.from_dict(n): float(n["score"]) for n in d.get("nodes", [])}
        edges = {(FeatureCoord.from_dict(e["src"]), FeatureCoord.from_dict(e["dst"])): float(e["score"]) for e in d.get("edges", [])}
        return cls(nodes, edges, nt, et, free, meta)


def write_circuit(c: Circuit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(c.to_dict(), indent=1, sort_keys=True) + "\n")


def read_circuit(path: str | Path) -> Circuit:
    return Circuit.from_dict(json.loads(Path(path).read_text()))


def to_dot(c: Circuit) -> str:
    """Graphviz description; positive-score nodes blue, negative red."""
    lines = ["digraph circuit {", "  rankdir=BT;"]
    for coord, s in c.sorted_nodes():
        color = "blue" if s >= 0 else "red"
        lines.append(f'  "{coord}" [label="{coord}\\n{s:.3g}", color={color}];')
    for (u, d), s in sorted(c.edges.items(), key=lambda kv: (kv[0][0].sort_key(), kv[0][1].sort_key())):
        lines.append(f'  "{u}" -> "{d}" [label="{s:.3g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _single_method(items: Sequence, what: str) -> str | None:
    methods = {x.method for x in items}
    if len(methods) > 1:
        raise ValueError(f"{what} mix scoring methods {sorted(methods)}")
    return next(iter(methods), None)


def extract_circuit(
    node_scores: Sequence[AttributionScore],
    edge_scores: Sequence[EdgeScore] = (),
    node_threshold: float = 0.1,
    edge_threshold: float = 0.001,
    free_sites: Sequence[SubmoduleId] = (),
    provenance: Mapping | None = None,
) -> Circuit:
    """Keep nodes with |score| >= node_threshold and edges with |score| >= edge_threshold between kept nodes."""
    m_nodes = _single_method(node_scores, "node scores")
    m_edges = _single_method(edge_scores, "edge scores")
    if m_nodes and m_edges and m_nodes != m_edges:
        raise ValueError(f"node scores ({m_nodes}) and edge scores ({m_edges}) use different methods")
    nodes = {s.coord: s.score for s in node_scores if abs(s.score) >= node_threshold}
    edges = {
        (e.src, e.dst): e.score
        for e in edge_scores
        if abs(e.score) >= edge_threshold and e.src in nodes and e.dst in nodes
    }
    prov = dict(provenance or {})
    if m_nodes:
        prov.setdefault("method", m_nodes)
    return Circuit(nodes, edges, node_threshold, edge_threshold, list(free_sites), prov)


# ---------------------------------------------------------------------------
# faithfulness
# ---------------------------------------------------------------------------


@dataclass
class FaithfulnessResult:
    faithfulness: float
    per_example: list[float]
    excluded: list[int]
    m_full: list[float]
    m_circuit: list[float]
    m_empty: list[float]

    def to_dict(self) -> dict:
        return {
            "faithfulness": self.faithfulness,
            "n_used": len(self.per_example),
            "excluded": self.excluded,
            "per_example": self.per_example,
            "m_full": self.m_full,
            "m_circuit": self.m_circuit,
            "m_empty": self.m_empty,
        }


def _keep_masks(spliced: SplicedModel, circuit_nodes, free: set, tokens: np.ndarray, examples: Sequence[Example]):
    """Per site, boolean masks ``[B, T, F]`` that are True where a feature gets zero-ablated."""
    B, T = tokens.shape
    masks = {}
    for s in spliced.sites:
        if s in free:
            continue
        masks[s] = np.ones((B, T, spliced.saes[s].d_features), dtype=bool)
    if circuit_nodes is None:
        return masks
    by_site: dict[SubmoduleId, list[FeatureCoord]] = {}
    for c in circuit_nodes:
        by_site.setdefault(c.site, []).append(c)
    for s, coords in by_site.items():
        if s not in masks:
            continue
        for b, ex in enumerate(examples):
            for c in coords:
                if c.position == "sum":
                    masks[s][b, :, c.feature] = False
                    continue
                if isinstance(c.position, (int, np.integer)) and not -T <= c.position < T:
                    # node found on longer sequences than this batch
                    continue
                for p in resolve_position(c.position, T, ex.positions):
                    masks[s][b, p, c.feature] = False
    return masks


def _ablated_metric(spliced, metric, tokens, ctx, masks):
    overrides = {s.name + "#feat": [Override(m, 0.0)] for s, m in masks.items() if m.any()}
    return np.asarray(spliced.run(tokens, clean=ctx, overrides=overrides, head=metric).metric, dtype=np.float64)


def faithfulness(
    spliced: SplicedModel,
    circuit: Circuit | None,
    dataset,
    metric,
    free_sites: Sequence[SubmoduleId] | None = None,
    floor: float = 1e-6,
) -> FaithfulnessResult:
    """Mean over examples of (m(C) - m(∅)) / (m(M) - m(∅)).

    m(C): every feature outside the circuit and outside the free sites is set to 0
    before decoding; m(∅): every non-free feature set to 0; m(M): the unablated
    spliced model. Examples with |m(M) - m(∅)| < ``floor`` are excluded and listed.
    ``circuit=None`` stands for the circuit containing every feature.
    """
    data = _as_examples(dataset)
    if free_sites is None:
        free_sites = circuit.free_sites if circuit is not None else []
    free = set(free_sites)
    nodes = None if circuit is None else list(circuit.nodes)
    n = len(data)
    m_full = np.zeros(n)
    m_circ = np.zeros(n)
    m_empty = np.zeros(n)
    for g in _groups(data, []):
        exs = [data[i] for i in g.index]
        ctx = spliced.clean_context(g.tokens)
        full = np.asarray(spliced.run(g.tokens, clean=ctx, head=metric).metric, dtype=np.float64)
        empty = _ablated_metric(spliced, metric, g.tokens, ctx, _keep_masks(spliced, [], free, g.tokens, exs))
        if circuit is None:
            circ = full.copy()
        else:
            circ = _ablated_metric(spliced, metric, g.tokens, ctx, _keep_masks(spliced, nodes, free, g.tokens, exs))
        m_full[g.index] = full
        m_empty[g.index] = empty
        m_circ[g.index] = circ
    ratios, excluded = [], []
    for i in range(n):
        den = m_full[i] - m_empty[i]
        if abs(den) < floor:
            excluded.append(i)
            continue
        ratios.append(float((m_circ[i] - m_empty[i]) / den))
    F = float(np.mean(ratios)) if ratios else float("nan")
    return FaithfulnessResult(F, ratios, excluded, m_full.tolist(), m_circ.tolist(), m_empty.tolist())


def faithfulness_sweep(
    spliced: SplicedModel,
    scores: Sequence[AttributionScore],
    dataset,
    metric,
    thresholds: Sequence[float],
    free_sites: Sequence[SubmoduleId] = (),
) -> list[dict]:
    out = []
    for t in sorted(thresholds, reverse=True):
        c = extract_circuit(scores, (), t, 0.0, free_sites)
        r = faithfulness(spliced, c, dataset, metric, free_sites)
        out.append({"threshold": t, "n_nodes": len(c), "faithfulness": r.faithfulness, "excluded": len(r.excluded)})
    return out


# ---------------------------------------------------------------------------
# overlap and activation statistics
# ---------------------------------------------------------------------------


def circuit_iou(c1: Circuit, c2: Circuit, use_position: bool = False) -> float:
    a, b = c1.feature_set(use_position), c2.feature_set(use_position)
    union = a | b
    if not union:
        warnings.warn("IoU of two empty circuits is defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return len(a & b) / len(union)


def _node_key(x):
    if isinstance(x, FeatureCoord):
        return (x.site, x.feature)
    return tuple(x)


def feature_recall(reference: Iterable, candidate: Iterable) -> float:
    """|reference ∩ candidate| / |reference| over (site, feature) identities."""
    ref = {_node_key(x) for x in reference}
    if not ref:
        raise ValueError("reference node set is empty")
    cand = {_node_key(x) for x in candidate}
    return len(ref & cand) / len(ref)


def random_recall_expectation(n_reference: int, n_candidate: int, universe: int) -> float:
    """Expected recall of a uniformly random candidate set of size ``n_candidate`` drawn from ``universe`` items."""
    if universe <= 0:
        raise ValueError("empty universe")
    return min(n_candidate, universe) / universe if n_reference else float("nan")


def empirical_random_recall(reference: Iterable, universe: Sequence, n_candidate: int, draws: int = 1000, seed: int = 0) -> float:
    """Mean recall of ``draws`` candidate sets sampled uniformly without replacement from ``universe``."""
    ref = {_node_key(x) for x in reference}
    if not ref:
        raise ValueError("reference node set is empty")
    items = sorted({_node_key(x) for x in universe}, key=lambda k: (k[0].order, k[1]))
    if n_candidate > len(items):
        raise ValueError(f"cannot draw {n_candidate} items from a universe of {len(items)}")
    hit = np.array([x in ref for x in items])
    rng = np.random.default_rng(seed)
    tot = 0
    for _ in range(draws):
        tot += int(hit[rng.choice(len(items), size=n_candidate, replace=False)].sum())
    return tot / (draws * len(ref))


def feature_activation_stats(
    spliced: SplicedModel,
    dataset,
    groups: Mapping[str, Sequence[FeatureCoord]],
    edits: Sequence[ActivationEdit] = (),
) -> dict[str, dict]:
    """Mean activation and fraction of (feature, example) pairs with activation > 0, per labeled group."""
    data = _as_examples(dataset)
    sums: dict[str, list[float]] = {k: [] for k in groups}
    for g in _groups(data, []):
        exs = [data[i] for i in g.index]
        T = g.tokens.shape[1]
        if edits:
            # per-example positions may differ in selectors, so edit one example at a time
            feats_rows = []
            for b, ex in enumerate(exs):
                ov = spliced.model.edits_to_overrides(edits, T, spliced.saes, ex.positions)
                res = spliced.run(g.tokens[b : b + 1], overrides=ov)
                feats_rows.append({s: res.act(s.name + "#feat")[0] for s in spliced.saes})
        else:
            ctx = spliced.clean_context(g.tokens)
            feats_rows = [{s: ctx.features[s][b] for s in spliced.saes} for b in range(len(exs))]
        for label, coords in groups.items():
            for c in coords:
                if c.site not in spliced.saes:
                    raise ValueError(f"no SAE attached at {c.site.name}")
                for b, ex in enumerate(exs):
                    ps = range(T) if c.position == "sum" else resolve_position(c.position, T, ex.positions)
                    for p in ps:
                        sums[label].append(float(feats_rows[b][c.site][p, c.feature]))
    out = {}
    for label, vals in sums.items():
        v = np.asarray(vals)
        out[label] = {
            "n_features": len(groups[label]),
            "n_pairs": int(v.size),
            "mean_activation": float(v.mean()) if v.size else 0.0,
            "fraction_active": float((v > 0).mean()) if v.size else 0.0,
        }
    return out
