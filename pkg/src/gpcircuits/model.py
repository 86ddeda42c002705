"""Small pre-norm autoregressive transformer built on the numerics tape.

Activation sites (``SubmoduleId``) are watched tape nodes, so any of them can be
captured, overwritten, or differentiated against. Attaching SAEs ("splicing")
inserts encode/decode nodes at a site and adds the frozen reconstruction
residual back, so an unedited spliced forward reproduces the plain forward
bit-for-bit.
"""

from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .numerics import Override, Tape, companion, load_tensors, save_tensors
from .numerics import kernels as K

log = logging.getLogger(__name__)

PAD = "<pad>"
KINDS = ("embedding", "residual", "attn_out", "mlp_out")
_KIND_SHORT = {"embedding": "embed", "residual": "resid", "attn_out": "attn", "mlp_out": "mlp"}
_SHORT_KIND = {v: k for k, v in _KIND_SHORT.items()}
_KIND_ORDER = {"attn_out": 0, "mlp_out": 1, "residual": 2}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_mlp: int = 512
    vocab_size: int = 64
    max_seq_len: int = 16
    rng_seed: int = 0

    def __post_init__(self):
        for k in ("n_layers", "d_model", "n_heads", "d_mlp", "vocab_size", "max_seq_len"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True, order=True)
class SubmoduleId:
    """Address of an activation site: the embedding output, or a layer's residual / attn / mlp output."""

    layer: int
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown site kind {self.kind!r}")
        if self.kind == "embedding" and self.layer != -1:
            raise ValueError("embedding site has layer -1")
        if self.kind != "embedding" and self.layer < 0:
            raise ValueError("layer must be >= 0")

    @classmethod
    def embedding(cls) -> "SubmoduleId":
        return cls(-1, "embedding")

    @classmethod
    def resid(cls, layer: int) -> "SubmoduleId":
        return cls(layer, "residual")

    @classmethod
    def attn(cls, layer: int) -> "SubmoduleId":
        return cls(layer, "attn_out")

    @classmethod
    def mlp(cls, layer: int) -> "SubmoduleId":
        return cls(layer, "mlp_out")

    @classmethod
    def parse(cls, name: str) -> "SubmoduleId":
        if name == "embed":
            return cls.embedding()
        short, _, layer = name.partition(".")
        if short not in _SHORT_KIND or not layer.isdigit():
            raise ValueError(f"cannot parse site {name!r}")
        return cls(int(layer), _SHORT_KIND[short])

    @property
    def name(self) -> str:
        if self.kind == "embedding":
            return "embed"
        return f"{_KIND_SHORT[self.kind]}.{self.layer}"

    @property
    def order(self) -> tuple[int, int]:
        """Position in the forward computation; smaller runs earlier."""
        if self.kind == "embedding":
            return (-1, 2)
        return (self.layer, _KIND_ORDER[self.kind])

    def check(self, config: ModelConfig) -> None:
        if self.kind != "embedding" and self.layer >= config.n_layers:
            raise ValueError(f"site {self.name} beyond n_layers={config.n_layers}")

    def __str__(self) -> str:
        return self.name


def all_sites(config: ModelConfig) -> list[SubmoduleId]:
    sites = [SubmoduleId.embedding()]
    for l in range(config.n_layers):
        sites += [SubmoduleId.attn(l), SubmoduleId.mlp(l), SubmoduleId.resid(l)]
    return sites


def resid_sites(config: ModelConfig) -> list[SubmoduleId]:
    return [SubmoduleId.embedding()] + [SubmoduleId.resid(l) for l in range(config.n_layers)]


class Tokenizer:
    """Whitespace word tokenizer over a closed vocabulary; id 0 is padding."""

    def __init__(self, words: Sequence[str]):
        vocab = [PAD] + [w for w in words if w != PAD]
        if len(set(vocab)) != len(vocab):
            raise ValueError("duplicate vocabulary entries")
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return 0

    def encode(self, text: str | Sequence[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[i] for i in ids if i != self.pad_id)

    def token_id(self, word: str) -> int:
        return self.encode([word])[0]


# ---------------------------------------------------------------------------
# metric heads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricSpec:
    """Behavioral metric over next-token predictions at one position.

    ``prob_diff``: sum of softmax probabilities of ``positive`` minus ``negative``.
    ``logit_diff``: the same sums taken over raw logits.
    """

    positive: tuple[int, ...]
    negative: tuple[int, ...]
    mode: str = "prob_diff"
    position: int = -1

    def __post_init__(self):
        object.__setattr__(self, "positive", tuple(int(t) for t in self.positive))
        object.__setattr__(self, "negative", tuple(int(t) for t in self.negative))
        if not self.positive or not self.negative:
            raise ValueError("metric token sets must be nonempty")
        if self.mode not in ("prob_diff", "logit_diff"):
            raise ValueError(f"unknown metric mode {self.mode!r}")

    @property
    def key(self):
        return ("metric", self.positive, self.negative, self.mode, self.position)

    def build(self, tape: Tape, env: dict):
        x = tape.slice(env["logits"], (slice(None), self.position, slice(None)))
        if self.mode == "prob_diff":
            x = tape.softmax(x)
        pos = tape.sum(tape.take(x, self.positive, axis=-1), axis=-1)
        neg = tape.sum(tape.take(x, self.negative, axis=-1), axis=-1)
        return tape.sub(pos, neg)


@dataclass(frozen=True)
class _LMLoss:
    key = ("lm_loss",)
    scalar = True

    def build(self, tape: Tape, env: dict):
        b, t, v = env["B"], env["T"], env["V"]
        tgt = tape.input("targets", (b * t,))
        w = tape.input("weights", (b * t,))
        return tape.cross_entropy(tape.reshape(env["logits"], (b * t, v)), tgt, w)


# ---------------------------------------------------------------------------
# tape construction
# ---------------------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m, v = cfg.d_model, cfg.d_mlp, cfg.vocab_size
    shapes = {"W_E": (v, d), "W_pos": (cfg.max_seq_len, d), "ln_f.g": (d,), "ln_f.b": (d,), "W_U": (d, v)}
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.W_Q": (d, d),
                p + "attn.b_Q": (d,),
                p + "attn.W_K": (d, d),
                p + "attn.b_K": (d,),
                p + "attn.W_V": (d, d),
                p + "attn.b_V": (d,),
                p + "attn.W_O": (d, d),
                p + "attn.b_O": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "mlp.W_in": (d, m),
                p + "mlp.b_in": (m,),
                p + "mlp.W_out": (m, d),
                p + "mlp.b_out": (d,),
            }
        )
    return shapes


def init_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.rng_seed)
    out = {}
    resid_scale = 0.02 / math.sqrt(2 * cfg.n_layers)
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b") or leaf == "b":
            arr = np.zeros(shape)
        elif leaf in ("W_O", "W_out"):
            arr = rng.normal(0.0, resid_scale, shape)
        else:
            arr = rng.normal(0.0, 0.02, shape)
        out[name] = arr.astype(dtype)
    return out


def _site(tape: Tape, v, sid: SubmoduleId, spliced: frozenset, sites: dict):
    name = sid.name
    if sid not in spliced:
        tape.watch(v, name)
        sites[name] = v
        return v
    tape.watch(v, name + "#in")
    p = f"sae.{name}."
    b_d = tape.input(p + "b_d")
    f = tape.sae_encode(v, tape.input(p + "W_e"), tape.input(p + "b_e"), b_d, name=name + "#feat")
    xhat = tape.sae_decode(f, tape.input(p + "W_d"), b_d)
    out = tape.add(tape.input(f"clean.{name}.x"), tape.sub(xhat, tape.input(f"clean.{name}.xhat")), name=name)
    sites[name] = out
    return out


@functools.lru_cache(maxsize=64)
def build_tape(cfg: ModelConfig, batch: int, seq_len: int, spliced: frozenset = frozenset(), head=None) -> Tape:
    """Record the forward pass for a fixed ``[batch, seq_len]`` token shape.

    Inputs: ``tokens`` plus one input per parameter (``param.<name>``), and for
    every spliced site the SAE weights and clean-run constants.
    """
    tape = Tape()
    d, h = cfg.d_model, cfg.n_heads
    dh = cfg.d_head
    B, T = batch, seq_len
    P = {n: tape.input("param." + n, s) for n, s in param_shapes(cfg).items()}
    toks = tape.input("tokens", (B, T))
    sites: dict = {}
    x = tape.add(tape.embed(P["W_E"], toks), tape.slice(P["W_pos"], (slice(0, T),)))
    x = _site(tape, x, SubmoduleId.embedding(), spliced, sites)
    inv = 1.0 / math.sqrt(dh)
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        hn = tape.layernorm(x, P[p + "ln1.g"], P[p + "ln1.b"])

        def heads(w, b, axes):
            y = tape.add(tape.matmul(hn, P[p + w]), P[p + b])
            return tape.transpose(tape.reshape(y, (B, T, h, dh)), axes)

        q = heads("attn.W_Q", "attn.b_Q", (0, 2, 1, 3))
        kT = heads("attn.W_K", "attn.b_K", (0, 2, 3, 1))
        v = heads("attn.W_V", "attn.b_V", (0, 2, 1, 3))
        pat = tape.causal_softmax(tape.scale(tape.matmul(q, kT), inv), name=f"pattern.{l}")
        z = tape.reshape(tape.transpose(tape.matmul(pat, v), (0, 2, 1, 3)), (B, T, d))
        a = tape.add(tape.matmul(z, P[p + "attn.W_O"]), P[p + "attn.b_O"])
        a = _site(tape, a, SubmoduleId.attn(l), spliced, sites)
        x = tape.add(x, a)
        hn2 = tape.layernorm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        m = tape.gelu(tape.add(tape.matmul(hn2, P[p + "mlp.W_in"]), P[p + "mlp.b_in"]))
        m = tape.add(tape.matmul(m, P[p + "mlp.W_out"]), P[p + "mlp.b_out"])
        m = _site(tape, m, SubmoduleId.mlp(l), spliced, sites)
        x = tape.add(x, m)
        x = _site(tape, x, SubmoduleId.resid(l), spliced, sites)
    logits = tape.matmul(tape.layernorm(x, P["ln_f.g"], P["ln_f.b"]), P["W_U"], name="logits")
    if head is not None:
        env = {"logits": logits, "sites": sites, "B": B, "T": T, "V": cfg.vocab_size, "config": cfg}
        per = head.build(tape, env)
        tape.watch(per, "metric")
        if getattr(head, "scalar", False):
            tape.watch(per, "metric_total")
        else:
            tape.sum(per, name="metric_total")
    return tape


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActivationEdit:
    """Replace an activation (``set_raw``) or one SAE feature (``set_feature``) during the forward pass.

    ``position`` is an absolute index or one of the selectors
    ``"verb"``, ``"final_noun"``, ``"all"``.
    """

    site: SubmoduleId
    position: int | str
    mode: str = "set_feature"
    feature: int | None = None
    value: Any = 0.0

    def __post_init__(self):
        if self.mode not in ("set_raw", "set_feature"):
            raise ValueError(f"unknown edit mode {self.mode!r}")
        if self.mode == "set_feature" and self.feature is None:
            raise ValueError("set_feature edits need a feature index")


POSITION_SELECTORS = ("verb", "final_noun", "all")


def resolve_position(pos: int | str, seq_len: int, positions: Mapping[str, int] | None = None) -> list[int]:
    if isinstance(pos, (int, np.integer)):
        p = int(pos) + (seq_len if pos < 0 else 0)
        if not 0 <= p < seq_len:
            raise ValueError(f"position {pos} outside sequence of length {seq_len}")
        return [p]
    if pos == "all":
        return list(range(seq_len))
    if pos not in POSITION_SELECTORS:
        raise ValueError(f"unknown position selector {pos!r}")
    if positions is None or pos not in positions or positions[pos] is None:
        raise ValueError(f"position selector {pos!r} cannot be resolved")
    return resolve_position(int(positions[pos]), seq_len)


@dataclass
class RunResult:
    tape: Tape
    ev: Any
    grads: dict = field(default_factory=dict)

    @property
    def logits(self) -> np.ndarray:
        return self.ev["logits"]

    @property
    def metric(self) -> np.ndarray:
        return self.ev["metric"]

    def act(self, name: str) -> np.ndarray:
        return self.ev[name]


class TransformerModel:
    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray], tokenizer: Tokenizer | None = None):
        self.config = config
        missing = set(param_shapes(config)) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        self.params = {k: np.asarray(v) for k, v in params.items()}
        self.tokenizer = tokenizer
        self._cast: dict = {}

    @classmethod
    def init(cls, config: ModelConfig, tokenizer: Tokenizer | None = None) -> "TransformerModel":
        return cls(config, init_params(config), tokenizer)

    def param_inputs(self, dtype=np.float64) -> dict[str, np.ndarray]:
        key = np.dtype(dtype).name
        if key not in self._cast:
            self._cast[key] = {"param." + k: v.astype(dtype) for k, v in self.params.items()}
        return self._cast[key]

    def check_tokens(self, tokens) -> np.ndarray:
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] == 0:
            raise ValueError(f"tokens must be a non-empty sequence or [batch, seq] array, got shape {arr.shape}")
        if arr.shape[1] > self.config.max_seq_len:
            raise ValueError(f"sequence length {arr.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        if arr.min() < 0 or arr.max() >= self.config.vocab_size:
            raise ValueError("token id out of vocabulary")
        return arr

    # -- low-level runs -----------------------------------------------------

    def run(
        self,
        tokens,
        *,
        saes: Mapping[SubmoduleId, Any] | None = None,
        clean: "CleanContext | None" = None,
        overrides: Mapping[str, Sequence[Override]] | None = None,
        head=None,
        grad_wrt: Sequence[str] = (),
        extra_inputs: Mapping[str, np.ndarray] | None = None,
        dtype=np.float64,
    ) -> RunResult:
        toks = self.check_tokens(tokens)
        B, T = toks.shape
        saes = dict(saes or {})
        spliced = frozenset(saes)
        for sid in spliced:
            sid.check(self.config)
        tape = build_tape(self.config, B, T, spliced, head)
        inputs = dict(self.param_inputs(dtype))
        inputs["tokens"] = toks
        if spliced:
            if clean is None:
                clean = self.clean_context(toks, saes, dtype=dtype)
            inputs.update(clean.inputs)
        if extra_inputs:
            inputs.update(extra_inputs)
        ev = tape.evaluate(inputs, overrides)
        res = RunResult(tape, ev)
        if grad_wrt:
            res.grads = tape.gradient(ev, "metric_total", list(grad_wrt))
        return res

    def clean_context(self, tokens, saes: Mapping[SubmoduleId, Any], dtype=np.float64) -> "CleanContext":
        toks = self.check_tokens(tokens)
        B, T = toks.shape
        tape = build_tape(self.config, B, T)
        inputs = dict(self.param_inputs(dtype))
        inputs["tokens"] = toks
        ev = tape.evaluate(inputs)
        ctx = CleanContext(tokens=toks, logits=ev["logits"])
        for sid, sae in saes.items():
            x = ev[sid.name]
            W_e, b_e, W_d, b_d = (np.asarray(a, dtype=dtype) for a in (sae.W_e, sae.b_e, sae.W_d, sae.b_d))
            f = K.sae_encode(x, W_e, b_e, b_d)
            xhat = K.sae_decode(f, W_d, b_d)
            n = sid.name
            ctx.features[sid] = f
            ctx.inputs.update(
                {
                    f"sae.{n}.W_e": W_e,
                    f"sae.{n}.b_e": b_e,
                    f"sae.{n}.b_d": b_d,
                    f"sae.{n}.W_d": W_d,
                    f"clean.{n}.x": x,
                    f"clean.{n}.xhat": xhat,
                }
            )
        return ctx

    # -- public operations --------------------------------------------------

    def forward(self, tokens, capture: Sequence[SubmoduleId | str] = (), dtype=np.float64):
        """Logits ``[T, V]`` (or ``[B, T, V]``) and the requested site activations."""
        toks = self.check_tokens(tokens)
        res = self.run(toks, dtype=dtype)
        acts = {}
        for c in capture:
            name = c.name if isinstance(c, SubmoduleId) else c
            acts[name] = res.act(name)
        logits = res.logits
        if np.ndim(tokens) == 1:
            logits = logits[0]
            acts = {k: v[0] for k, v in acts.items()}
        return logits, acts

    def edits_to_overrides(
        self,
        edits: Sequence[ActivationEdit],
        seq_len: int,
        saes: Mapping[SubmoduleId, Any],
        positions: Mapping[str, int] | None = None,
    ) -> dict[str, list[Override]]:
        seen = set()
        out: dict[str, list[Override]] = {}
        for e in edits:
            e.site.check(self.config)
            for p in resolve_position(e.position, seq_len, positions):
                key = (e.site, p, e.feature if e.mode == "set_feature" else None)
                if key in seen:
                    raise ValueError(f"conflicting edits at site {e.site.name}, position {p}, feature {key[2]}")
                seen.add(key)
                if e.mode == "set_feature":
                    if e.site not in saes:
                        raise ValueError(f"set_feature edit at {e.site.name} requires an attached SAE")
                    out.setdefault(e.site.name + "#feat", []).append(Override((slice(None), p, int(e.feature)), e.value))
                else:
                    out.setdefault(e.site.name, []).append(Override((slice(None), p, slice(None)), e.value))
        return out

    def forward_with_edits(
        self,
        tokens,
        edits: Sequence[ActivationEdit] = (),
        saes: Mapping[SubmoduleId, Any] | None = None,
        positions: Mapping[str, int] | None = None,
        dtype=np.float64,
    ) -> np.ndarray:
        toks = self.check_tokens(tokens)
        saes = dict(saes or {})
        ov = self.edits_to_overrides(edits, toks.shape[1], saes, positions)
        res = self.run(toks, saes=saes, overrides=ov, dtype=dtype)
        return res.logits[0] if np.ndim(tokens) == 1 else res.logits

    def next_token_metric(self, tokens, metric: MetricSpec, dtype=np.float64) -> float | np.ndarray:
        res = self.run(tokens, head=metric, dtype=dtype)
        m = res.metric
        return float(m[0]) if np.ndim(tokens) == 1 else m

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_tensors(companion(path, ".sfct"), self.params)
        side = {"config": asdict(self.config), "vocab": self.tokenizer.vocab if self.tokenizer else None}
        companion(path, ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TransformerModel":
        path = Path(path)
        side = json.loads(companion(path, ".json").read_text())
        tok = Tokenizer(side["vocab"][1:]) if side.get("vocab") else None
        return cls(ModelConfig(**side["config"]), load_tensors(companion(path, ".sfct")), tok)


@dataclass
class CleanContext:
    """Clean-run constants for a spliced forward pass on fixed tokens."""

    tokens: np.ndarray
    logits: np.ndarray
    features: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)

    def take(self, rows) -> "CleanContext":
        """Sub-batch (with repetition allowed) of the examples in this context."""
        rows = np.asarray(rows, dtype=np.int64)
        return CleanContext(
            tokens=self.tokens[rows],
            logits=self.logits[rows],
            features={k: v[rows] for k, v in self.features.items()},
            inputs={k: (v[rows] if k.startswith("clean.") else v) for k, v in self.inputs.items()},
        )

    def tile(self, n: int) -> "CleanContext":
        """Repeat a batch-of-one context ``n`` times along the batch axis."""
        rep = lambda a: np.repeat(a, n, axis=0) if a.ndim >= 2 and a.shape[0] == self.tokens.shape[0] else a
        return CleanContext(
            tokens=np.repeat(self.tokens, n, axis=0),
            logits=np.repeat(self.logits, n, axis=0),
            features={k: np.repeat(v, n, axis=0) for k, v in self.features.items()},
            inputs={k: (rep(v) if k.startswith("clean.") else v) for k, v in self.inputs.items()},
        )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: Any = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class LMTrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 3e-3
    warmup: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 100


class Adam:
    """AdamW over a dict of float arrays, updated in place."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float | None = None, clip: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        scale = 1.0 if not clip or norm <= clip else clip / (norm + 1e-12)
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in sorted(grads):
            g = grads[k].astype(self.params[k].dtype) * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.wd and self.params[k].ndim >= 2:
                upd = upd + self.wd * self.params[k]
            self.params[k] -= (lr * upd).astype(self.params[k].dtype)
        return norm


def lr_at(step: int, total: int, base: float, warmup: int) -> float:
    if step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return base * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> np.ndarray:
    t = max(len(s) for s in seqs)
    out = np.full((len(seqs), t), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def lm_batch_inputs(toks: np.ndarray, lengths: np.ndarray) -> dict[str, np.ndarray]:
    """Next-token targets and loss weights for a padded batch."""
    B, T = toks.shape
    tgt = np.zeros((B, T), dtype=np.int64)
    tgt[:, :-1] = toks[:, 1:]
    w = (np.arange(T)[None, :] < (lengths[:, None] - 1)).astype(np.float64)
    return {"targets": tgt.reshape(-1), "weights": w.reshape(-1)}


def lm_loss(model: TransformerModel, corpus: Sequence[Sequence[int]], batch_size: int = 256, dtype=np.float64) -> float:
    """Mean next-token cross-entropy over every predicted token in ``corpus``."""
    head = _LMLoss()
    total, count = 0.0, 0.0
    for i in range(0, len(corpus), batch_size):
        chunk = corpus[i : i + batch_size]
        toks = pad_batch(chunk)
        lengths = np.array([len(s) for s in chunk])
        extra = lm_batch_inputs(toks, lengths)
        res = model.run(toks, head=head, extra_inputs={k: v.astype(dtype) if k == "weights" else v for k, v in extra.items()}, dtype=dtype)
        n = extra["weights"].sum()
        total += float(res.ev["metric_total"]) * n
        count += n
    return total / max(count, 1.0)


def train_lm(
    config: ModelConfig,
    corpus: Sequence[Sequence[int]],
    hp: LMTrainConfig | None = None,
    tokenizer: Tokenizer | None = None,
    init: TransformerModel | None = None,
) -> tuple[TransformerModel, list[dict]]:
    """Train with AdamW on next-token cross-entropy; returns the model and a per-log-step record."""
    hp = hp or LMTrainConfig()
    if not corpus:
        raise ValueError("empty corpus")
    if any(len(s) > config.max_seq_len for s in corpus):
        raise ValueError("corpus sentence longer than max_seq_len")
    model = init or TransformerModel.init(config, tokenizer)
    params = {k: v.astype(np.float32).copy() for k, v in model.params.items()}
    opt = Adam(params, hp.lr, weight_decay=hp.weight_decay)
    rng = np.random.default_rng(hp.seed)
    head = _LMLoss()
    n = len(corpus)
    order = rng.permutation(n)
    cursor = 0
    history: list[dict] = []
    last_good = {k: v.copy() for k, v in params.items()}
    running = []
    for step in range(hp.steps):
        if cursor + hp.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + hp.batch_size] if n >= hp.batch_size else rng.integers(0, n, hp.batch_size)
        cursor += hp.batch_size
        chunk = [corpus[i] for i in idx]
        toks = pad_batch(chunk)
        extra = lm_batch_inputs(toks, np.array([len(s) for s in chunk]))
        extra["weights"] = extra["weights"].astype(np.float32)
        B, T = toks.shape
        tape = build_tape(config, B, T, frozenset(), head)
        inputs = {"param." + k: v for k, v in params.items()}
        inputs.update(extra)
        inputs["tokens"] = toks
        ev = tape.evaluate(inputs)
        loss = float(ev["metric_total"])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}", TransformerModel(config, last_good, tokenizer))
        grads = tape.gradient(ev, "metric_total", ["param." + k for k in params])
        grads = {k[len("param.") :]: g for k, g in grads.items()}
        opt.step(grads, lr=lr_at(step, hp.steps, hp.lr, hp.warmup), clip=hp.grad_clip)
        running.append(loss)
        if (step + 1) % hp.log_every == 0 or step == hp.steps - 1:
            if not all(np.isfinite(v).all() for v in params.values()):
                raise TrainingDiverged(f"non-finite parameters at step {step}", TransformerModel(config, last_good, tokenizer))
            last_good = {k: v.copy() for k, v in params.items()}
            rec = {"step": step + 1, "loss": float(np.mean(running))}
            history.append(rec)
            log.info("lm step %d loss %.4f", rec["step"], rec["loss"])
            running = []
    return TransformerModel(config, params, tokenizer), history
