"""Indirect effects of SAE features on a metric: exact zero-ablation, AtP, and AtP-IG, for nodes and edges.

Sign convention: a positive score means the feature pushes the metric toward its
positive token set (zeroing it lowers m).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .model import MetricSpec, SubmoduleId, resolve_position
from .numerics import Override
from .sae import SplicedModel

log = logging.getLogger(__name__)

METHODS = ("exact", "atp", "atp_ig")
IG_RULES = ("literal", "trapezoid")
ROW_CHUNK = 256

__all__ = [
    "AttributionScore",
    "EdgeScore",
    "Example",
    "FeatureCoord",
    "FeatureMetric",
    "ResidualReadout",
    "MetricSpec",
    "atp",
    "atp_ig",
    "edge_scores",
    "exact_ie",
    "examples_from_stimuli",
    "node_scores",
    "read_edges_jsonl",
    "read_scores_jsonl",
    "score_matrix",
    "top_k",
    "write_scores_jsonl",
]


@dataclass(frozen=True)
class FeatureCoord:
    site: SubmoduleId
    feature: int
    position: int | str

    def sort_key(self):
        p = self.position
        return (self.site.order, self.feature, (0, p, "") if isinstance(p, (int, np.integer)) else (1, 0, str(p)))

    def __lt__(self, other: "FeatureCoord") -> bool:
        return self.sort_key() < other.sort_key()

    def to_dict(self) -> dict:
        return {"layer": self.site.layer, "kind": self.site.kind, "feature": int(self.feature), "position": self.position}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureCoord":
        pos = d["position"]
        return cls(SubmoduleId(int(d["layer"]), d["kind"]), int(d["feature"]), int(pos) if isinstance(pos, int) else pos)

    def __str__(self) -> str:
        return f"{self.site.name}/{self.feature}@{self.position}"


@dataclass(frozen=True)
class AttributionScore:
    coord: FeatureCoord
    score: float
    method: str
    n_examples: int

    def to_dict(self) -> dict:
        d = self.coord.to_dict()
        d.update({"site": self.coord.site.name, "score": self.score, "method": self.method, "n_examples": self.n_examples})
        return d


@dataclass(frozen=True)
class EdgeScore:
    src: FeatureCoord
    dst: FeatureCoord
    score: float
    method: str
    n_examples: int

    def to_dict(self) -> dict:
        return {
            "src": self.src.to_dict(),
            "dst": self.dst.to_dict(),
            "score": self.score,
            "method": self.method,
            "n_examples": self.n_examples,
        }


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    positions: Mapping[str, int] = field(default_factory=dict)

    def __hash__(self):
        return hash((self.tokens, tuple(sorted(self.positions.items()))))


def examples_from_stimuli(stimuli, tokenizer) -> list[Example]:
    return [Example(tuple(tokenizer.encode(s.tokens)), dict(s.positions)) for s in stimuli]


@dataclass(frozen=True)
class FeatureMetric:
    """Synthetic metric ``coef * a**power`` of one feature at one absolute position, summed with nothing else."""

    site: SubmoduleId
    feature: int
    position: int
    coef: float = 1.0
    power: int = 1

    @property
    def key(self):
        return ("feature_metric", self.site, self.feature, self.position, self.coef, self.power)

    def build(self, tape, env):
        a = tape.slice(tape.var(self.site.name + "#feat"), (slice(None), self.position, self.feature))
        if self.power == 2:
            a = tape.square(a)
        elif self.power != 1:
            raise ValueError("power must be 1 or 2")
        return tape.scale(a, self.coef)


@dataclass(frozen=True)
class ResidualReadout:
    """Fixed linear readout ``w · x`` of one site's output at one absolute position.

    The site's output is linear in its own SAE features, so node scores at that
    site are the same under every attribution method.
    """

    site: SubmoduleId
    weights: tuple[float, ...]
    position: int = -1

    @classmethod
    def random(cls, site: SubmoduleId, d_model: int, seed: int = 0, position: int = -1) -> "ResidualReadout":
        w = np.random.default_rng(seed).normal(size=d_model) / np.sqrt(d_model)
        return cls(site, tuple(float(v) for v in w), position)

    @property
    def key(self):
        return ("readout", self.site, self.weights, self.position)

    def build(self, tape, env):
        x = tape.slice(env["sites"][self.site.name], (slice(None), self.position, slice(None)))
        w = tape.constant(np.asarray(self.weights)[:, None])
        return tape.sum(tape.matmul(x, w), axis=-1)


# ---------------------------------------------------------------------------
# batched evaluation
# ---------------------------------------------------------------------------


@dataclass
class _Group:
    """Examples sharing token length and resolved positions, evaluated as one batch."""

    index: list[int]  # positions in the dataset
    tokens: np.ndarray
    labels: list  # position labels (int or selector)
    resolved: list[int]  # absolute position per label
    ctx: Any = None
    metric: np.ndarray | None = None  # clean metric per example
    grads: dict = field(default_factory=dict)


def _as_examples(dataset) -> list[Example]:
    out = []
    for ex in dataset:
        if isinstance(ex, Example):
            out.append(ex)
        else:
            out.append(Example(tuple(int(t) for t in np.asarray(ex).ravel())))
    return out


def _groups(dataset: Sequence[Example], positions) -> list[_Group]:
    if not dataset:
        raise ValueError("empty dataset")
    lens = {len(ex.tokens) for ex in dataset}
    labels_spec = list(positions) if not isinstance(positions, (str, int)) else [positions]
    absolute = any(isinstance(p, (int, np.integer)) or p == "all" for p in labels_spec)
    if absolute and len(lens) > 1:
        raise ValueError("dataset is not token-aligned; use position selectors such as 'verb' or 'final_noun'")
    groups: dict[tuple, _Group] = {}
    for i, ex in enumerate(dataset):
        T = len(ex.tokens)
        labels, resolved = [], []
        for p in labels_spec:
            if p == "all":
                for t in range(T):
                    labels.append(t)
                    resolved.append(t)
            else:
                r = resolve_position(p, T, ex.positions)[0]
                labels.append(int(r) if isinstance(p, (int, np.integer)) else p)
                resolved.append(r)
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate scored positions {labels}")
        key = (T, tuple(resolved))
        if key not in groups:
            groups[key] = _Group([], None, labels, resolved)
        groups[key].index.append(i)
    out = []
    for key in sorted(groups):
        g = groups[key]
        g.tokens = np.array([dataset[i].tokens for i in g.index], dtype=np.int64)
        out.append(g)
    return out


def _clean_pass(spliced: SplicedModel, metric, g: _Group, sites, dtype=np.float64):
    g.ctx = spliced.clean_context(g.tokens, dtype=dtype)
    res = spliced.run(g.tokens, clean=g.ctx, head=metric, grad_wrt=[s.name + "#feat" for s in sites], dtype=dtype)
    g.metric = np.asarray(res.metric, dtype=np.float64)
    g.grads = {s: res.grads[s.name + "#feat"] for s in sites}


def _head_sites(metric) -> set:
    site = getattr(metric, "site", None)
    return {site} if isinstance(site, SubmoduleId) else set(getattr(metric, "sites", ()))


def _row_runs(spliced, metric, ctx, jobs, want_grad: bool, dtype=np.float64):
    """Evaluate one edited forward pass per job.

    ``jobs``: list of (example_row, site, position, feature, value). Returns the
    metric per job and, when ``want_grad``, dm/da at the job's own coordinate.
    Sites upstream of the edited one are left unspliced: unedited they reproduce
    the clean activations bit-for-bit, so only downstream SAEs affect the result.
    """
    m_out = np.zeros(len(jobs))
    g_out = np.zeros(len(jobs))
    by_site: dict[SubmoduleId, list[int]] = {}
    for j, job in enumerate(jobs):
        by_site.setdefault(job[1], []).append(j)
    keep_always = _head_sites(metric)
    for site in sorted(by_site, key=lambda s: s.order):
        saes = {s: v for s, v in spliced.saes.items() if s.order >= site.order or s in keep_always}
        name = site.name + "#feat"
        js = by_site[site]
        for start in range(0, len(js), ROW_CHUNK):
            chunk = js[start : start + ROW_CHUNK]
            sub = ctx.take(np.array([jobs[j][0] for j in chunk]))
            r = np.arange(len(chunk))
            pos = np.array([jobs[j][2] for j in chunk])
            feat = np.array([jobs[j][3] for j in chunk])
            val = np.array([jobs[j][4] for j in chunk], dtype=dtype)
            res = spliced.model.run(
                sub.tokens,
                saes=saes,
                clean=sub,
                overrides={name: [Override((r, pos, feat), val)]},
                head=metric,
                grad_wrt=[name] if want_grad else [],
                dtype=dtype,
            )
            m_out[chunk] = res.metric
            if want_grad:
                g_out[chunk] = res.grads[name][r, pos, feat]
    return m_out, g_out


def _ig_weights(K: int, rule: str) -> np.ndarray:
    if K < 1:
        raise ValueError("K must be >= 1")
    if rule == "literal":
        return np.full(K + 1, 1.0 / K)
    if rule == "trapezoid":
        w = np.full(K + 1, 1.0 / K)
        w[0] = w[-1] = 0.5 / K
        return w
    raise ValueError(f"unknown IG rule {rule!r}")


def _scores_for_group(
    spliced: SplicedModel,
    metric,
    g: _Group,
    sites: Sequence[SubmoduleId],
    method: str,
    K: int,
    baseline: float,
    rule: str,
    candidates: Mapping[SubmoduleId, Sequence[int]] | None,
) -> dict[SubmoduleId, np.ndarray]:
    """Scores ``[n_examples, n_labels, d_features]`` per site for one aligned group."""
    out = {}
    B = len(g.index)
    pos = np.array(g.resolved)
    acts = {s: g.ctx.features[s][:, pos, :] for s in sites}  # [B, L, F]
    if method == "atp":
        for s in sites:
            out[s] = (acts[s] - baseline) * g.grads[s][:, pos, :]
        return out
    jobs = []
    for s in sites:
        A = acts[s]
        F = A.shape[-1]
        keep = np.ones(F, bool)
        if candidates is not None and s in candidates:
            keep[:] = False
            keep[np.asarray(candidates[s], dtype=np.int64)] = True
        nz = np.argwhere((A != baseline) & keep[None, None, :])
        for b, l, f in nz:
            a = float(A[b, l, f])
            if method == "exact":
                jobs.append((int(b), s, int(pos[l]), int(f), 0.0, int(l)))
            else:
                for k in range(K + 1):
                    jobs.append((int(b), s, int(pos[l]), int(f), baseline + (k / K) * (a - baseline), int(l), k))
        out[s] = np.zeros_like(A)
    if not jobs:
        return out
    m, grad = _row_runs(spliced, metric, g.ctx, [j[:5] for j in jobs], want_grad=(method == "atp_ig"))
    if method == "exact":
        for j, (b, s, p, f, _, l) in enumerate(jobs):
            out[s][b, l, f] = g.metric[b] - m[j]
    else:
        w = _ig_weights(K, rule)
        for j, (b, s, p, f, _, l, k) in enumerate(jobs):
            out[s][b, l, f] += w[k] * grad[j]
        for s in sites:
            out[s] *= acts[s] - baseline
    return out


def _check_coord(spliced: SplicedModel, coord: FeatureCoord, T: int):
    if coord.site not in spliced.saes:
        raise ValueError(f"no SAE attached at {coord.site.name}")
    F = spliced.saes[coord.site].d_features
    if not 0 <= coord.feature < F:
        raise ValueError(f"feature {coord.feature} out of range for {coord.site.name} (d_features={F})")
    if isinstance(coord.position, (int, np.integer)) and not -T <= coord.position < T:
        raise ValueError(f"position {coord.position} out of range for length {T}")


def _single(spliced, metric, coord, tokens, method, K=10, baseline=0.0, rule="literal", positions=None):
    ex = tokens if isinstance(tokens, Example) else Example(tuple(int(t) for t in np.asarray(tokens).ravel()), positions or {})
    T = len(ex.tokens)
    _check_coord(spliced, coord, T)
    p = coord.position
    if isinstance(p, (int, np.integer)) and p < 0:
        p = int(p) + T
    groups = _groups([ex], [p])
    g = groups[0]
    _clean_pass(spliced, metric, g, [coord.site])
    sc = _scores_for_group(spliced, metric, g, [coord.site], method, K, baseline, rule, {coord.site: [coord.feature]})
    return float(sc[coord.site][0, 0, coord.feature])


def exact_ie(spliced: SplicedModel, metric, coord: FeatureCoord, tokens, positions=None) -> float:
    """m(clean) - m(feature set to 0 at coord)."""
    return _single(spliced, metric, coord, tokens, "exact", positions=positions)


def atp(spliced: SplicedModel, metric, coord: FeatureCoord, tokens, positions=None) -> float:
    """a * dm/da on the clean run."""
    return _single(spliced, metric, coord, tokens, "atp", positions=positions)


def atp_ig(
    spliced: SplicedModel,
    metric,
    coord: FeatureCoord,
    tokens,
    K: int = 10,
    baseline: float = 0.0,
    rule: str = "literal",
    positions=None,
) -> float:
    """(a - a') times the weighted sum of dm/da at a' + (k/K)(a - a'), k = 0..K.

    ``rule="literal"`` weights every one of the K+1 gradients by 1/K;
    ``rule="trapezoid"`` halves the two endpoint weights.
    """
    _ig_weights(K, rule)
    return _single(spliced, metric, coord, tokens, "atp_ig", K, baseline, rule, positions)


def _per_example_scores(
    spliced, metric, dataset, method, K, baseline, rule, positions, sites, candidates
) -> tuple[dict[SubmoduleId, np.ndarray], list, list[_Group]]:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "atp_ig":
        _ig_weights(K, rule)
    data = _as_examples(dataset)
    sites = list(sites) if sites is not None else spliced.sites
    for s in sites:
        if s not in spliced.saes:
            raise ValueError(f"no SAE attached at {s.name}")
    groups = _groups(data, positions)
    labels = groups[0].labels
    if any(g.labels != labels for g in groups):
        raise ValueError("groups resolved to different position labels")
    full = {s: np.zeros((len(data), len(labels), spliced.saes[s].d_features)) for s in sites}
    for g in groups:
        _clean_pass(spliced, metric, g, sites)
        sc = _scores_for_group(spliced, metric, g, sites, method, K, baseline, rule, candidates)
        for s in sites:
            full[s][g.index] = sc[s]
    return full, labels, groups


def node_scores(
    spliced: SplicedModel,
    metric,
    dataset,
    method: str = "atp_ig",
    K: int = 10,
    positions: Sequence[int | str] | str = "all",
    sites: Sequence[SubmoduleId] | None = None,
    baseline: float = 0.0,
    rule: str = "literal",
    candidates: Mapping[SubmoduleId, Sequence[int]] | None = None,
    sum_positions: bool = False,
    keep_zero: bool = False,
) -> list[AttributionScore]:
    """Dataset-mean score per (site, feature, position), sorted by score descending then coordinate."""
    full, labels, _ = _per_example_scores(spliced, metric, dataset, method, K, baseline, rule, positions, sites, candidates)
    n = next(iter(full.values())).shape[0] if full else 0
    out = []
    for s, arr in full.items():
        mean = arr.mean(axis=0)  # [L, F]
        if sum_positions:
            mean = mean.sum(axis=0, keepdims=True)
        for li in range(mean.shape[0]):
            lab = "sum" if sum_positions else labels[li]
            row = mean[li]
            idx = range(len(row)) if keep_zero else np.flatnonzero(row)
            for f in idx:
                out.append(AttributionScore(FeatureCoord(s, int(f), lab), float(row[f]), method, n))
    out.sort(key=lambda a: (-a.score, a.coord.sort_key()))
    return out


def score_matrix(scores: Iterable[AttributionScore]) -> dict[FeatureCoord, float]:
    return {s.coord: s.score for s in scores}


def top_k(scores: Sequence[AttributionScore], k: int, by_abs: bool = True) -> list[FeatureCoord]:
    key = (lambda a: (-abs(a.score), a.coord.sort_key())) if by_abs else (lambda a: (-a.score, a.coord.sort_key()))
    return [a.coord for a in sorted(scores, key=key)[:k]]


# ---------------------------------------------------------------------------
# edges
# ---------------------------------------------------------------------------


def edge_scores(
    spliced: SplicedModel,
    metric,
    dataset,
    upstream: SubmoduleId,
    downstream: SubmoduleId,
    method: str = "atp",
    K: int = 10,
    positions: Sequence[int | str] | str = "all",
    up_nodes: Iterable[FeatureCoord] | None = None,
    down_nodes: Iterable[FeatureCoord] | None = None,
    rule: str = "literal",
) -> list[EdgeScore]:
    """Dataset-mean of dm/da_d * da_d/da_u * a_u for every upstream u and downstream d.

    With ``method="atp_ig"`` the product dm/da_d * da_d/da_u is averaged over the
    interpolation path of a_u (same weights as ``atp_ig``), which needs one edited
    pass per (u, k); restrict ``up_nodes`` to keep that tractable.
    """
    if method not in ("atp", "atp_ig"):
        raise ValueError("edge scores support methods 'atp' and 'atp_ig'")
    if upstream.order >= downstream.order:
        raise ValueError(f"upstream {upstream.name} is not strictly before downstream {downstream.name}")
    for s in (upstream, downstream):
        if s not in spliced.saes:
            raise ValueError(f"no SAE attached at {s.name}")
    data = _as_examples(dataset)
    groups = _groups(data, positions)
    labels = groups[0].labels
    lab_idx = {lab: i for i, lab in enumerate(labels)}
    up_set = None if up_nodes is None else {(c.feature, c.position) for c in up_nodes if c.site == upstream}
    down_set = None if down_nodes is None else {(c.feature, c.position) for c in down_nodes if c.site == downstream}
    w = _ig_weights(K, rule) if method == "atp_ig" else None
    total: dict[tuple[FeatureCoord, FeatureCoord], float] = {}
    un, dn = upstream.name + "#feat", downstream.name + "#feat"
    for g in groups:
        _clean_pass(spliced, metric, g, [upstream, downstream])
        pos = np.array(g.resolved)
        for bi in range(len(g.index)):
            a_d = g.ctx.features[downstream][bi]
            a_u = g.ctx.features[upstream][bi]
            dnodes = []
            for li, p in enumerate(pos):
                for f in np.flatnonzero(a_d[p]):
                    if down_set is None or (int(f), labels[li]) in down_set:
                        dnodes.append((li, int(p), int(f)))
            if not dnodes:
                continue
            unodes = []
            for li, p in enumerate(pos):
                for f in np.flatnonzero(a_u[p]):
                    if up_set is None or (int(f), labels[li]) in up_set:
                        unodes.append((li, int(p), int(f)))
            if not unodes:
                continue
            if method == "atp":
                J = _edge_jacobian(spliced, metric, g.ctx, bi, [None], dnodes, un, dn)[0]  # [n_d, T, F_u]
                for di, (dl, dp, df) in enumerate(dnodes):
                    for ul, up, uf in unodes:
                        v = J[di, up, uf] * a_u[up, uf]
                        key = (FeatureCoord(upstream, uf, labels[ul]), FeatureCoord(downstream, df, labels[dl]))
                        total[key] = total.get(key, 0.0) + float(v)
            else:
                for ul, up, uf in unodes:
                    a = float(a_u[up, uf])
                    path = [(up, uf, (k / K) * a) for k in range(K + 1)]
                    Js = _edge_jacobian(spliced, metric, g.ctx, bi, path, dnodes, un, dn)
                    acc = sum(w[k] * Js[k][:, up, uf] for k in range(K + 1))
                    for di, (dl, dp, df) in enumerate(dnodes):
                        key = (FeatureCoord(upstream, uf, labels[ul]), FeatureCoord(downstream, df, labels[dl]))
                        total[key] = total.get(key, 0.0) + float(acc[di] * a)
    n = len(data)
    out = [EdgeScore(u, d, v / n, method, n) for (u, d), v in total.items() if v != 0.0]
    out.sort(key=lambda e: (-e.score, e.src.sort_key(), e.dst.sort_key()))
    return out


def _edge_jacobian(spliced, metric, ctx, bi, path, dnodes, un, dn):
    """For each upstream override in ``path`` (or None for clean), dm/da_d * da_d/da_u for every d.

    Returns a list of arrays ``[n_d, T, F_u]``.
    """
    nd = len(dnodes)
    out = []
    for ov in path:
        rows = np.full(nd, bi)
        sub = ctx.take(rows)
        overrides = None
        if ov is not None:
            up, uf, val = ov
            overrides = {un: [Override((slice(None), up, uf), val)]}
        res = spliced.run(sub.tokens, clean=sub, overrides=overrides, head=metric, grad_wrt=[dn])
        gd = res.grads[dn]  # dm/da_d, identical across rows
        cot = np.zeros_like(gd)
        for r, (_, p, f) in enumerate(dnodes):
            cot[r, p, f] = gd[r, p, f]
        J = res.tape.vjp(res.ev, dn, cot, [un])[un]
        out.append(J)
    return out


# ---------------------------------------------------------------------------
# dumps
# ---------------------------------------------------------------------------


def write_scores_jsonl(scores: Iterable[AttributionScore | EdgeScore], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in scores:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def read_scores_jsonl(path: str | Path) -> list[AttributionScore]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "src" in d:
            raise ValueError("file holds edge scores; use read_edges_jsonl")
        out.append(AttributionScore(FeatureCoord.from_dict(d), float(d["score"]), d["method"], int(d["n_examples"])))
    return out


def read_edges_jsonl(path: str | Path) -> list[EdgeScore]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(
                EdgeScore(FeatureCoord.from_dict(d["src"]), FeatureCoord.from_dict(d["dst"]), float(d["score"]), d["method"], int(d["n_examples"]))
            )
    return out
