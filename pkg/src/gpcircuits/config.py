"""Run configuration: nested sections with defaults, strict key checking and a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

__all__ = [
    "ConfigError",
    "ModelSection",
    "SaeSection",
    "AttributionSection",
    "CircuitSection",
    "InterventionSection",
    "StimuliSection",
    "ProbeSection",
    "RunConfig",
    "load_config",
    "config_from_dict",
    "config_hash",
    "dump_config",
]


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join("  " + e for e in self.errors))


@dataclass
class ModelSection:
    """Transformer shape and language-model training."""

    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_mlp: int = 512
    max_seq_len: int = 16
    init_seed: int = 0
    steps: int = 3000
    batch_size: int = 64
    lr: float = 3e-3
    warmup: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    train_seed: int = 0


@dataclass
class SaeSection:
    """One SAE per listed site; ``all`` means every embedding, attention, MLP and residual site."""

    sites: list[str] = field(default_factory=lambda: ["all"])
    d_features: int = 1024
    sparsity_weight: float = 0.1
    lr: float = 1e-3
    warmup: int = 200
    steps: int = 4000
    batch_size: int = 512
    resample_every: int = 1000
    normalize: bool = True
    seed: int = 0
    n_sentences: int = 4000


@dataclass
class AttributionSection:
    method: str = "atp_ig"
    K: int = 10
    rule: str = "literal"
    metric: str = "prob_diff"
    structures: list[str] = field(default_factory=lambda: ["NPZ", "NPS"])
    condition: str = "ambiguous"
    n_examples: int = 24
    node_threshold: float = 0.05
    edge_threshold: float = 0.02
    edges: bool = False


@dataclass
class CircuitSection:
    free_sites: str = "embed_layer0"
    sweep: list[float] = field(default_factory=lambda: [1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001])


@dataclass
class InterventionSection:
    """``clamp_high`` of ``auto`` scales the base value by each SAE's mean top-decile activation."""

    sites: list[str] = field(default_factory=lambda: ["resid.1", "resid.2", "resid.3"])
    k: int = 8
    min_contrast: float = 0.5
    method: str = "atp"
    K: int = 10
    n_examples: int = 12
    verb_group: bool = True
    clamp_high: Any = "auto"
    n_control_seeds: int = 20
    control_seed: int = 0
    targets: dict = field(default_factory=lambda: {"NPZ": "non_gp", "NPS": "gp"})


@dataclass
class StimuliSection:
    grammar_seed: int = 0
    corpus_sentences: int = 20000
    heldout_sentences: int = 1000
    treebank_sentences: int = 3000
    n_per_structure: int = 24
    stimulus_seed: int = 0


@dataclass
class ProbeSection:
    layers: list[str] = field(default_factory=lambda: ["embed", "resid.0", "resid.1", "resid.2", "resid.3"])
    hidden: int = 128
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 256
    seed: int = 0
    train_fraction: float = 0.8
    attribution_examples: int = 8


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    sae: SaeSection = field(default_factory=SaeSection)
    attribution: AttributionSection = field(default_factory=AttributionSection)
    circuit: CircuitSection = field(default_factory=CircuitSection)
    intervention: InterventionSection = field(default_factory=InterventionSection)
    stimuli: StimuliSection = field(default_factory=StimuliSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _type_ok(value, tp) -> bool:
    if tp is Any:
        return True
    origin = typing.get_origin(tp)
    if origin is list:
        (inner,) = typing.get_args(tp) or (Any,)
        return isinstance(value, list) and all(_type_ok(v, inner) for v in value)
    if origin is dict or tp is dict:
        return isinstance(value, dict)
    if tp is bool:
        return isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, tp)


def _build(cls, data: Mapping, path: str, errors: list[str]):
    if not isinstance(data, Mapping):
        errors.append(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            errors.append(f"{path}{k}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v, tp = data[f.name], hints[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, v, f"{path}{f.name}.", errors)
        elif _type_ok(v, tp):
            kwargs[f.name] = float(v) if tp is float else v
        else:
            errors.append(f"{path}{f.name}: expected {getattr(tp, '__name__', tp)}, got {v!r}")
    return cls(**kwargs)


def _check_values(cfg: RunConfig, errors: list[str]) -> None:
    from .model import SubmoduleId

    def site_list(names, where, allow_all=False):
        for s in names:
            if allow_all and s == "all":
                continue
            try:
                sid = SubmoduleId.parse(s)
            except ValueError as e:
                errors.append(f"{where}: {e}")
                continue
            if sid.layer >= cfg.model.n_layers:
                errors.append(f"{where}: {s} beyond the model's {cfg.model.n_layers} layers")

    m = cfg.model
    for k in ("n_layers", "d_model", "n_heads", "d_mlp", "max_seq_len", "steps", "batch_size"):
        if getattr(m, k) <= 0:
            errors.append(f"model.{k}: must be positive")
    if m.n_heads > 0 and m.d_model % m.n_heads:
        errors.append("model.d_model: must be divisible by model.n_heads")
    if m.lr <= 0:
        errors.append("model.lr: must be positive")
    s = cfg.sae
    site_list(s.sites, "sae.sites", allow_all=True)
    for k in ("d_features", "steps", "batch_size", "n_sentences"):
        if getattr(s, k) <= 0:
            errors.append(f"sae.{k}: must be positive")
    if s.sparsity_weight < 0:
        errors.append("sae.sparsity_weight: must be >= 0")
    a = cfg.attribution
    if a.method not in ("atp", "atp_ig", "exact"):
        errors.append(f"attribution.method: unknown method {a.method!r}")
    if a.rule not in ("literal", "trapezoid"):
        errors.append(f"attribution.rule: unknown rule {a.rule!r}")
    if a.metric not in ("prob_diff", "logit_diff"):
        errors.append(f"attribution.metric: unknown metric {a.metric!r}")
    if a.K <= 0:
        errors.append("attribution.K: must be positive")
    from .stimuli import CONDITIONS, STRUCTURES

    for st in a.structures:
        if st not in STRUCTURES:
            errors.append(f"attribution.structures: unknown structure {st!r}")
    if a.condition not in CONDITIONS:
        errors.append(f"attribution.condition: unknown condition {a.condition!r}")
    if cfg.circuit.free_sites not in ("embed_layer0", "quarter", "none"):
        errors.append(f"circuit.free_sites: unknown rule {cfg.circuit.free_sites!r}")
    iv = cfg.intervention
    site_list(iv.sites, "intervention.sites")
    if not (iv.clamp_high == "auto" or (isinstance(iv.clamp_high, (int, float)) and not isinstance(iv.clamp_high, bool) and iv.clamp_high >= 0)):
        errors.append(f"intervention.clamp_high: expected 'auto' or a number >= 0, got {iv.clamp_high!r}")
    if iv.method not in ("atp", "atp_ig", "exact"):
        errors.append(f"intervention.method: unknown method {iv.method!r}")
    for st, tgt in iv.targets.items():
        if st not in STRUCTURES or tgt not in ("gp", "non_gp"):
            errors.append(f"intervention.targets: bad entry {st}: {tgt}")
    if not 0 <= iv.min_contrast <= 1:
        errors.append("intervention.min_contrast: must be in [0, 1]")
    if iv.n_control_seeds < 0:
        errors.append("intervention.n_control_seeds: must be >= 0")
    st = cfg.stimuli
    for k in ("corpus_sentences", "treebank_sentences", "n_per_structure"):
        if getattr(st, k) <= 0:
            errors.append(f"stimuli.{k}: must be positive")
    p = cfg.probe
    site_list(p.layers, "probe.layers")
    for name in p.layers:
        try:
            if SubmoduleId.parse(name).kind not in ("embedding", "residual"):
                errors.append(f"probe.layers: {name} is not a residual-stream site")
        except ValueError:
            pass
    if not 0 < p.train_fraction < 1:
        errors.append("probe.train_fraction: must be in (0, 1)")
    if p.hidden <= 0 or p.steps <= 0:
        errors.append("probe.hidden and probe.steps: must be positive")


def config_from_dict(data: Mapping | None) -> RunConfig:
    errors: list[str] = []
    # fields with the wrong type fall back to defaults, so value checks still run on the rest
    cfg = _build(RunConfig, data or {}, "", errors)
    _check_values(cfg, errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return config_from_dict({})
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError([f"{path}: not valid YAML ({e})"]) from None
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
