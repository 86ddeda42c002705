"""Clamp groups of SAE features during the forward pass and measure the change in next-token preference."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attribution import FeatureCoord, examples_from_stimuli, node_scores
from .model import ActivationEdit, MetricSpec, SubmoduleId, resolve_position
from .numerics.kernels import softmax
from .sae import SplicedModel
from .stimuli import Stimulus, group_by_shape, sem

__all__ = [
    "FeatureGroup",
    "InterventionPlan",
    "ConditionSummary",
    "InterventionReport",
    "GroupRule",
    "run_intervention",
    "make_random_control",
    "mean_top_decile_activation",
    "default_clamp_value",
    "select_groups",
    "write_plan",
    "read_plan",
]

BASE_CLAMP = 2.0


@dataclass(frozen=True)
class FeatureGroup:
    label: str
    members: tuple[FeatureCoord, ...]
    clamp_value: float

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError(f"group {self.label!r} has no members")
        if not np.isfinite(self.clamp_value) or self.clamp_value < 0:
            raise ValueError(f"group {self.label!r}: clamp value must be finite and >= 0, got {self.clamp_value}")
        if len(set(self.members)) != len(self.members):
            raise ValueError(f"group {self.label!r} lists a member twice")

    def to_dict(self) -> dict:
        return {"label": self.label, "clamp_value": self.clamp_value, "members": [m.to_dict() for m in self.members]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureGroup":
        return cls(d["label"], tuple(FeatureCoord.from_dict(m) for m in d["members"]), float(d["clamp_value"]))


@dataclass(frozen=True)
class InterventionPlan:
    groups: tuple[FeatureGroup, ...] = ()
    control_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        seen: dict[FeatureCoord, float] = {}
        for g in self.groups:
            for m in g.members:
                if m in seen and seen[m] != g.clamp_value:
                    raise ValueError(f"{m} is clamped to both {seen[m]} and {g.clamp_value}")
                seen[m] = g.clamp_value

    def edits(self) -> list[ActivationEdit]:
        # a coordinate shared by two groups with the same value is applied once
        out, seen = [], set()
        for g in self.groups:
            for m in g.members:
                if m not in seen:
                    seen.add(m)
                    out.append(ActivationEdit(m.site, m.position, "set_feature", m.feature, g.clamp_value))
        return out

    def to_dict(self) -> dict:
        return {"control_seed": self.control_seed, "groups": [g.to_dict() for g in self.groups]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "InterventionPlan":
        return cls(tuple(FeatureGroup.from_dict(g) for g in d.get("groups", [])), int(d.get("control_seed", 0)))


def write_plan(plan: InterventionPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")


def read_plan(path: str | Path) -> InterventionPlan:
    return InterventionPlan.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ConditionSummary:
    condition: str
    n: int
    p_gp: float
    p_nongp: float
    m: float
    se: float

    def as_tsv(self) -> str:
        return f"{self.condition}\t{self.n}\t{self.p_gp:.6f}\t{self.p_nongp:.6f}\t{self.m:.6f}\t{self.se:.6f}"


@dataclass
class InterventionReport:
    conditions: dict[str, ConditionSummary]
    per_stimulus: dict[str, np.ndarray]
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def delta(self, condition: str) -> float:
        return self.conditions[condition].m - self.conditions["baseline"].m

    def control_ratio(self, condition: str = "intervention") -> float:
        """|Δm| of ``condition`` over the mean |Δm| of all control conditions."""
        ctrl = [abs(self.delta(c)) for c in self.conditions if c.startswith("control")]
        if not ctrl:
            raise ValueError("report has no control conditions")
        denom = float(np.mean(ctrl))
        return float("inf") if denom == 0 else abs(self.delta(condition)) / denom

    def to_dict(self) -> dict:
        return {
            "conditions": {k: asdict(v) for k, v in self.conditions.items()},
            "skipped": [{"index": i, "reason": r} for i, r in self.skipped],
        }

    def format(self) -> str:
        lines = ["condition\tn\tp_gp\tp_nongp\tm\tse"]
        lines += [c.as_tsv() for c in self.conditions.values()]
        return "\n".join(lines) + "\n"


def _resolvable(plan: InterventionPlan, stim: Stimulus) -> str | None:
    for g in plan.groups:
        for m in g.members:
            try:
                resolve_position(m.position, len(stim.tokens), stim.positions)
            except ValueError as e:
                return str(e)
    return None


def _continuation(spliced: SplicedModel, stimuli: Sequence[Stimulus], idx: Sequence[int], plan: InterventionPlan | None):
    tok = spliced.model.tokenizer
    p_gp = np.full(len(stimuli), np.nan)
    p_ng = np.full(len(stimuli), np.nan)
    edits = plan.edits() if plan is not None else []
    sub = [stimuli[i] for i in idx]
    for _, rows in sorted(group_by_shape(sub).items()):
        first = sub[rows[0]]
        ids = np.array([tok.encode(sub[r].tokens) for r in rows])
        # stimuli in one shape group share every annotated position, so one set of overrides serves the batch
        logits = spliced.forward_with_edits(ids, edits, first.positions)
        probs = softmax(logits[:, -1, :])
        for j, r in enumerate(rows):
            i = idx[r]
            p_gp[i] = probs[j, tok.token_id(stimuli[i].gp_token)]
            p_ng[i] = probs[j, tok.token_id(stimuli[i].nongp_token)]
    return p_gp, p_ng


def _summary(name: str, p_gp: np.ndarray, p_ng: np.ndarray, idx: Sequence[int]) -> ConditionSummary:
    d = p_gp[idx] - p_ng[idx]
    return ConditionSummary(name, len(idx), float(p_gp[idx].mean()), float(p_ng[idx].mean()), float(d.mean()), sem(d))


def run_intervention(
    spliced: SplicedModel,
    plan: InterventionPlan,
    stimuli: Sequence[Stimulus],
    control_seeds: Sequence[int] = (),
) -> InterventionReport:
    """Baseline, clamped and random-control runs over the same stimuli.

    ``m`` is p(gp_token) - p(nongp_token) at the last position. Stimuli whose
    annotations cannot resolve one of the plan's position selectors are left
    out of every condition and listed in ``skipped``.
    """
    if spliced.model.tokenizer is None:
        raise ValueError("model has no tokenizer")
    skipped, keep = [], []
    for i, s in enumerate(stimuli):
        why = _resolvable(plan, s)
        if why is None:
            keep.append(i)
        else:
            skipped.append((i, why))
    if not keep:
        raise ValueError("no stimulus can resolve the plan's positions")

    conds: dict[str, ConditionSummary] = {}
    per: dict[str, np.ndarray] = {}

    def record(name, p):
        p_gp, p_ng = _continuation(spliced, stimuli, keep, p)
        conds[name] = _summary(name, p_gp, p_ng, keep)
        per[name] = p_gp - p_ng

    record("baseline", None)
    record("intervention", plan)
    for seed in control_seeds:
        record(f"control.{seed}", make_random_control(plan, spliced, seed))
    return InterventionReport(conds, per, skipped)


def make_random_control(plan: InterventionPlan, spliced: SplicedModel, seed: int) -> InterventionPlan:
    """Same groups, sizes, clamp values and positions, with each member swapped for a random feature at its site.

    Replacements are drawn without replacement per site and never hit an
    original member of any group.
    """
    rng = np.random.default_rng(seed)
    taken: dict[SubmoduleId, set[int]] = {}
    for g in plan.groups:
        for m in g.members:
            taken.setdefault(m.site, set()).add(m.feature)
    need: dict[SubmoduleId, int] = {}
    for g in plan.groups:
        for m in g.members:
            need[m.site] = need.get(m.site, 0) + 1
    pools: dict[SubmoduleId, list[int]] = {}
    for site in sorted(need, key=lambda s: s.order):
        if site not in spliced.saes:
            raise ValueError(f"no SAE attached at {site.name}")
        free = np.setdiff1d(np.arange(spliced.saes[site].d_features), sorted(taken[site]))
        if len(free) < need[site]:
            raise ValueError(f"site {site.name} has {len(free)} features outside the plan, need {need[site]}")
        pools[site] = list(rng.choice(free, size=need[site], replace=False))
    groups = []
    for g in plan.groups:
        members = tuple(FeatureCoord(m.site, int(pools[m.site].pop()), m.position) for m in g.members)
        groups.append(FeatureGroup(f"random-{g.label}", members, g.clamp_value))
    return InterventionPlan(tuple(groups), seed)


# ---------------------------------------------------------------------------
# choosing groups
# ---------------------------------------------------------------------------


def mean_top_decile_activation(acts: np.ndarray) -> float:
    """Mean of the positive activations at or above their 90th percentile."""
    a = np.asarray(acts, dtype=np.float64).ravel()
    a = a[a > 0]
    if a.size == 0:
        return 0.0
    return float(a[a >= np.quantile(a, 0.9)].mean())


def default_clamp_value(features: np.ndarray) -> float:
    """High clamp value for one SAE, scaled to its typical large activation."""
    return BASE_CLAMP * mean_top_decile_activation(features)


@dataclass(frozen=True)
class GroupRule:
    """Heuristics that turn attribution scores and activation contrasts into feature groups.

    A feature is a reading detector at ``position`` when it is selective, meaning
    its mean activation on stimuli forcing that reading exceeds the other
    reading's by at least ``min_contrast`` times the former, and its attribution
    score on those stimuli pushes the metric toward that reading.
    """

    sites: tuple[SubmoduleId, ...]
    k: int = 8
    min_contrast: float = 0.5
    method: str = "atp_ig"
    K: int = 10
    n_examples: int = 12
    verb_group: bool = True


def _mean_features(spliced: SplicedModel, stimuli: Sequence[Stimulus], sites, selector: str) -> dict[SubmoduleId, np.ndarray]:
    tok = spliced.model.tokenizer
    acc = {s: [] for s in sites}
    for _, idx in sorted(group_by_shape(stimuli).items()):
        ids = np.array([tok.encode(stimuli[i].tokens) for i in idx])
        feats = spliced.features(ids)
        p = stimuli[idx[0]].positions[selector]
        for s in sites:
            acc[s].append(feats[s][:, p, :])
    return {s: np.concatenate(v).mean(axis=0) for s, v in acc.items()}


def _detectors(spliced, stimuli_for, stimuli_against, metric, rule, selector, sign):
    """Top features at ``selector`` that fire more for one reading and whose score has the given sign."""
    on = _mean_features(spliced, stimuli_for, rule.sites, selector)
    off = _mean_features(spliced, stimuli_against, rule.sites, selector)
    data = examples_from_stimuli(stimuli_for[: rule.n_examples], spliced.model.tokenizer)
    scores = node_scores(spliced, metric, data, rule.method, rule.K, positions=[selector], sites=list(rule.sites))
    picked = []
    for a in scores:
        s = a.coord.site
        if sign * a.score <= 0:
            continue
        hi, lo = on[s][a.coord.feature], off[s][a.coord.feature]
        if hi <= 0 or hi - lo < rule.min_contrast * hi:
            continue
        picked.append((-sign * a.score, a.coord.sort_key(), a.coord))
    picked.sort()
    return [c for _, _, c in picked[: rule.k]]


def select_groups(
    spliced: SplicedModel,
    stimuli: Sequence[Stimulus],
    structure: str,
    target: str,
    rule: GroupRule,
    clamp_scale: Mapping[SubmoduleId, float],
) -> InterventionPlan:
    """Build a plan that pushes ``structure`` stimuli toward the ``target`` reading ("gp" or "non_gp").

    Subject detectors fire on the final noun of non-GP stimuli and push toward
    the non-GP token; object detectors are the GP counterpart. Verb detectors
    fire on the verb of non-GP stimuli (intransitive or clause-taking verbs).
    ``clamp_scale`` maps each site to its high clamp value.
    """
    if target not in ("gp", "non_gp"):
        raise ValueError(f"target must be 'gp' or 'non_gp', got {target!r}")
    tok = spliced.model.tokenizer
    gp = [s for s in stimuli if s.structure == structure and s.condition == "gp"]
    ng = [s for s in stimuli if s.structure == structure and s.condition == "non_gp"]
    if not gp or not ng:
        raise ValueError(f"need gp and non_gp stimuli for {structure}")
    metric = MetricSpec([tok.token_id(gp[0].gp_token)], [tok.token_id(gp[0].nongp_token)], "prob_diff")
    subj = _detectors(spliced, ng, gp, metric, rule, "final_noun", -1)
    obj = _detectors(spliced, gp, ng, metric, rule, "final_noun", +1)

    def clamp(members, high):
        # one group per site so that each gets its own SAE-scaled high value
        out = {}
        for c in members:
            out.setdefault(c.site, []).append(c)
        return [(site, tuple(cs), clamp_scale[site] if high else 0.0) for site, cs in sorted(out.items(), key=lambda kv: kv[0].order)]

    up = target == "non_gp"
    groups = []
    for site, cs, v in clamp(subj, up):
        groups.append(FeatureGroup(f"subject-detectors@{site.name}", cs, v))
    for site, cs, v in clamp(obj, not up):
        groups.append(FeatureGroup(f"object-detectors@{site.name}", cs, v))
    if rule.verb_group:
        verb = _detectors(spliced, ng, gp, metric, rule, "verb", -1)
        for site, cs, v in clamp(verb, up):
            groups.append(FeatureGroup(f"verb-detectors@{site.name}", cs, v))
    return InterventionPlan(tuple(g for g in groups if g.members))
