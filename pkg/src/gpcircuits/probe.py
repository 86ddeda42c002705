"""Arc-standard parse-action probes over residual-stream states.

Stack convention: ``s1`` is the top of the stack and ``s2`` the item below it.
``LEFT_ARC`` makes s1 the head of s2 and pops s2. ``RIGHT_ARC`` makes s2 the
head of s1 and pops s1. ``GEN`` moves the next token from the buffer onto the
stack. Token indices are 1-based and head 0 is the root, as in ``DepTree``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import Adam, SubmoduleId, TransformerModel, lr_at, pad_batch
from .numerics.container import companion, load_tensors, save_tensors
from .numerics.kernels import softmax
from .numerics.tape import Tape
from .stimuli import DepTree, Stimulus

log = logging.getLogger(__name__)

__all__ = [
    "Action",
    "ParserState",
    "NonProjectiveTree",
    "crossing_arcs",
    "oracle_actions",
    "oracle_states",
    "replay",
    "attaching_action",
    "ActionProbe",
    "probe_forward",
    "ProbeMetric",
    "ProbeTrainConfig",
    "ProbeTrainingDiverged",
    "state_dataset",
    "fit_probe",
    "train_probe",
    "eval_probe",
    "decode",
    "probe_reading",
]


class Action(enum.IntEnum):
    LEFT_ARC = 0
    RIGHT_ARC = 1
    GEN = 2


N_ACTIONS = len(Action)


@dataclass
class ParserState:
    n: int
    stack: list[int] = field(default_factory=list)
    next_token: int = 1
    heads: dict[int, int] = field(default_factory=dict)

    @property
    def buffer(self) -> list[int]:
        return list(range(self.next_token, self.n + 1))

    @property
    def done(self) -> bool:
        return self.next_token > self.n and len(self.stack) <= 1

    def legal(self) -> list[Action]:
        out = []
        if len(self.stack) >= 2:
            out += [Action.LEFT_ARC, Action.RIGHT_ARC]
        if self.next_token <= self.n:
            out.append(Action.GEN)
        return out

    def apply(self, a: Action) -> None:
        a = Action(a)
        if a not in self.legal():
            raise ValueError(f"{a.name} is illegal with stack {self.stack} and {self.n - self.next_token + 1} buffered tokens")
        if a == Action.GEN:
            self.stack.append(self.next_token)
            self.next_token += 1
        elif a == Action.LEFT_ARC:
            s1 = self.stack.pop()
            s2 = self.stack.pop()
            self.heads[s2] = s1
            self.stack.append(s1)
        else:
            s1 = self.stack.pop()
            self.heads[s1] = self.stack[-1]

    def finish(self) -> list[int]:
        """Head list with the remaining stack item (if any) as root."""
        heads = dict(self.heads)
        for t in self.stack:
            heads.setdefault(t, 0)
        return [heads.get(i, 0) for i in range(1, self.n + 1)]


class NonProjectiveTree(ValueError):
    def __init__(self, pair):
        super().__init__(f"arcs {pair[0]} and {pair[1]} cross")
        self.pair = pair


def crossing_arcs(heads: Sequence[int]) -> tuple[tuple[int, int], tuple[int, int]] | None:
    """First pair of (head, dependent) arcs that cross, treating the root arc as spanning from position 0."""
    arcs = [(h, d) for d, h in enumerate(heads, start=1)]
    spans = [(min(h, d), max(h, d)) for h, d in arcs]
    for i in range(len(arcs)):
        a, b = spans[i]
        for j in range(i + 1, len(arcs)):
            c, e = spans[j]
            if a < c < b < e or c < a < e < b:
                return arcs[i], arcs[j]
    return None


def _tree_heads(tree: DepTree | Sequence[int]) -> list[int]:
    return list(tree.heads) if isinstance(tree, DepTree) else list(tree)


def oracle_states(tree: DepTree | Sequence[int]) -> list[tuple[ParserState, Action]]:
    """Every state along the gold derivation, paired with the gold action taken there."""
    heads = _tree_heads(tree)
    pair = crossing_arcs(heads)
    if pair is not None:
        raise NonProjectiveTree(pair)
    n = len(heads)
    pending = [0] * (n + 1)
    for h in heads:
        if h:
            pending[h] += 1
    st = ParserState(n)
    out = []
    while not st.done:
        a = None
        if len(st.stack) >= 2:
            s1, s2 = st.stack[-1], st.stack[-2]
            if heads[s2 - 1] == s1:
                a = Action.LEFT_ARC
            elif heads[s1 - 1] == s2 and pending[s1] == 0:
                a = Action.RIGHT_ARC
        if a is None:
            if st.next_token > st.n:
                raise ValueError(f"gold tree {heads} cannot be derived (stack {st.stack})")
            a = Action.GEN
        out.append((ParserState(st.n, list(st.stack), st.next_token, dict(st.heads)), a))
        if a == Action.LEFT_ARC:
            pending[st.stack[-1]] -= 1
        elif a == Action.RIGHT_ARC:
            pending[st.stack[-2]] -= 1
        st.apply(a)
    return out


def oracle_actions(tree: DepTree | Sequence[int]) -> list[Action]:
    return [a for _, a in oracle_states(tree)]


def replay(n: int, actions: Iterable[Action]) -> list[int]:
    st = ParserState(n)
    for a in actions:
        st.apply(a)
    return st.finish()


def attaching_action() -> Action:
    """The arc action the oracle takes when the lower stack item heads the top one.

    Read off a two-token tree (token 1 heads token 2) rather than fixed by hand,
    so it always follows the stack convention above.
    """
    return oracle_actions([0, 1])[-1]


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


@dataclass
class ActionProbe:
    """``P(a) ∝ exp(e_a · relu(W1 z + b1) + b_a)`` with ``z = [(h_below - mu) / sd, (h_top - mu) / sd]``."""

    site: SubmoduleId
    W1: np.ndarray  # [2d, H]
    b1: np.ndarray  # [H]
    E: np.ndarray  # [3, H]
    b: np.ndarray  # [3]
    mu: np.ndarray  # [d]
    sd: np.ndarray  # [d]

    def __post_init__(self):
        d2, h = self.W1.shape
        if d2 != 2 * self.mu.shape[0] or self.E.shape != (N_ACTIONS, h) or self.b.shape != (N_ACTIONS,):
            raise ValueError("inconsistent probe parameter shapes")

    @property
    def d_model(self) -> int:
        return self.mu.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "E": self.E, "b": self.b, "mu": self.mu, "sd": self.sd}

    def digest(self) -> str:
        h = hashlib.sha256(self.site.name.encode())
        for k, v in sorted(self.arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
        return h.hexdigest()

    @classmethod
    def init(cls, site: SubmoduleId, d_model: int, hidden: int = 128, seed: int = 0, mu=None, sd=None) -> "ActionProbe":
        rng = np.random.default_rng(seed)
        return cls(
            site,
            rng.normal(0, 1 / np.sqrt(2 * d_model), (2 * d_model, hidden)),
            np.zeros(hidden),
            rng.normal(0, 1 / np.sqrt(hidden), (N_ACTIONS, hidden)),
            np.zeros(N_ACTIONS),
            np.zeros(d_model) if mu is None else np.asarray(mu, dtype=np.float64),
            np.ones(d_model) if sd is None else np.asarray(sd, dtype=np.float64),
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_tensors(companion(path, ".sfct"), {k: np.asarray(v, dtype=np.float64) for k, v in self.arrays().items()})
        companion(path, ".json").write_text(json.dumps({"site": self.site.name}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ActionProbe":
        path = Path(path)
        meta = json.loads(companion(path, ".json").read_text())
        t = load_tensors(companion(path, ".sfct"))
        return cls(SubmoduleId.parse(meta["site"]), t["W1"], t["b1"], t["E"], t["b"], t["mu"], t["sd"])


def probe_forward(probe: ActionProbe, h_below: np.ndarray, h_top: np.ndarray, site: SubmoduleId | str | None = None) -> np.ndarray:
    """Action distribution ``[..., 3]`` for states whose top two stack items have the given representations."""
    if site is not None:
        sid = SubmoduleId.parse(site) if isinstance(site, str) else site
        if sid != probe.site:
            raise ValueError(f"probe reads {probe.site.name}, got representations from {sid.name}")
    h_below = np.asarray(h_below, dtype=np.float64)
    h_top = np.asarray(h_top, dtype=np.float64)
    if h_below.shape != h_top.shape or h_below.shape[-1] != probe.d_model:
        raise ValueError(f"expected two [..., {probe.d_model}] arrays, got {h_below.shape} and {h_top.shape}")
    z = np.concatenate([(h_below - probe.mu) / probe.sd, (h_top - probe.mu) / probe.sd], axis=-1)
    hid = np.maximum(z @ probe.W1 + probe.b1, 0.0)
    return softmax(hid @ probe.E.T + probe.b)


def _probe_logits(tape: Tape, z, P) -> object:
    hid = tape.relu(tape.add(tape.matmul(z, P["W1"]), P["b1"]))
    return tape.add(tape.matmul(hid, tape.transpose(P["E"], (1, 0))), P["b"])


@dataclass(frozen=True, eq=False)
class ProbeMetric:
    """Metric head ``P(arc) - P(GEN)`` of a probe reading two absolute positions of the model's residual stream."""

    probe: ActionProbe
    below: int
    top: int
    arc: Action | None = None

    @property
    def key(self):
        return ("probe", self.probe.digest(), self.below, self.top, int(self.action))

    @property
    def action(self) -> Action:
        return attaching_action() if self.arc is None else Action(self.arc)

    def __hash__(self):
        return hash(self.key)

    def __eq__(self, other):
        return isinstance(other, ProbeMetric) and self.key == other.key

    def build(self, tape: Tape, env: dict):
        name = self.probe.site.name
        if name not in env["sites"]:
            raise ValueError(f"model has no site {name}")
        h = env["sites"][name]
        p = self.probe
        norm = lambda x: tape.mul(tape.sub(x, tape.constant(p.mu)), tape.constant(1.0 / p.sd))
        below = norm(tape.slice(h, (slice(None), self.below, slice(None))))
        top = norm(tape.slice(h, (slice(None), self.top, slice(None))))
        P = {k: tape.constant(getattr(p, k)) for k in ("W1", "b1", "E", "b")}
        probs = tape.softmax(_probe_logits(tape, tape.concat([below, top], axis=-1), P))
        arc = tape.take(probs, (int(self.action),), axis=-1)
        gen = tape.take(probs, (int(Action.GEN),), axis=-1)
        return tape.sum(tape.sub(arc, gen), axis=-1)


# ---------------------------------------------------------------------------
# data and training
# ---------------------------------------------------------------------------


def _tree_token_ids(model: TransformerModel, trees: Sequence[DepTree]) -> list[list[int]]:
    if model.tokenizer is None:
        raise ValueError("model has no tokenizer")
    ids = [model.tokenizer.encode(t.tokens) for t in trees]
    if any(len(s) > model.config.max_seq_len for s in ids):
        raise ValueError(f"treebank has sentences longer than {model.config.max_seq_len}")
    return ids


def _site_acts(model: TransformerModel, ids: Sequence[Sequence[int]], sites: Sequence[SubmoduleId], batch: int = 256):
    """Per-sentence ``[len, d]`` activations at each site (right padding is invisible to causal attention)."""
    out = {s: [] for s in sites}
    for i in range(0, len(ids), batch):
        part = ids[i : i + batch]
        _, acts = model.forward(pad_batch(part), capture=sites)
        for s in sites:
            a = acts[s.name]
            out[s].extend(a[j, : len(seq)] for j, seq in enumerate(part))
    return out


def state_dataset(model: TransformerModel, trees: Sequence[DepTree], sites: Sequence[SubmoduleId]):
    """Representations of (s2, s1) for every gold state with two or more stack items.

    Returns ``({site: (below [N, d], top [N, d])}, actions [N], legal mask [N, 3])``.
    """
    ids = _tree_token_ids(model, trees)
    acts = _site_acts(model, ids, sites)
    rows, ys, masks = [], [], []
    for k, t in enumerate(trees):
        for st, a in oracle_states(t):
            if len(st.stack) < 2:
                continue
            rows.append((k, st.stack[-2] - 1, st.stack[-1] - 1))
            ys.append(int(a))
            m = np.zeros(N_ACTIONS, dtype=bool)
            m[[int(x) for x in st.legal()]] = True
            masks.append(m)
    feats = {}
    for s in sites:
        below = np.array([acts[s][k][i] for k, i, _ in rows])
        top = np.array([acts[s][k][j] for k, _, j in rows])
        feats[s] = (below, top)
    return feats, np.array(ys, dtype=np.int64), np.array(masks).reshape(-1, N_ACTIONS)


@dataclass(frozen=True)
class ProbeTrainConfig:
    hidden: int = 128
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 256
    warmup: int = 50
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 100

    def check(self) -> None:
        errs = []
        if self.hidden <= 0:
            errs.append("hidden must be positive")
        if self.lr <= 0:
            errs.append("lr must be positive")
        if self.steps <= 0 or self.batch_size <= 0:
            errs.append("steps and batch_size must be positive")
        if errs:
            raise ValueError("; ".join(errs))


class ProbeTrainingDiverged(RuntimeError):
    pass


_TRAIN_TAPES: dict = {}


def _train_tape(d2: int, hidden: int, batch: int) -> Tape:
    key = (d2, hidden, batch)
    if key not in _TRAIN_TAPES:
        tape = Tape()
        z = tape.input("z", (batch, d2))
        P = {
            "W1": tape.input("W1", (d2, hidden)),
            "b1": tape.input("b1", (hidden,)),
            "E": tape.input("E", (N_ACTIONS, hidden)),
            "b": tape.input("b", (N_ACTIONS,)),
        }
        logits = _probe_logits(tape, z, P)
        tape.cross_entropy(logits, tape.input("y", (batch,)), tape.input("w", (batch,)), name="loss")
        _TRAIN_TAPES[key] = tape
    return _TRAIN_TAPES[key]


def fit_probe(site: SubmoduleId, below: np.ndarray, top: np.ndarray, y: np.ndarray, cfg: ProbeTrainConfig | None = None):
    """Train a probe on precomputed state representations; returns (probe, history)."""
    cfg = cfg or ProbeTrainConfig()
    cfg.check()
    if len(y) == 0:
        raise ValueError("no parser states to train on")
    both = np.concatenate([below, top])
    mu = both.mean(axis=0)
    sd = both.std(axis=0) + 1e-6
    probe = ActionProbe.init(site, below.shape[1], cfg.hidden, cfg.seed, mu, sd)
    Z = np.concatenate([(below - mu) / sd, (top - mu) / sd], axis=1)
    params = {k: getattr(probe, k).copy() for k in ("W1", "b1", "E", "b")}
    opt = Adam(params, cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, len(y))
    tape = _train_tape(Z.shape[1], cfg.hidden, bs)
    w = np.ones(bs)
    history, running = [], []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(y), bs)
        ev = tape.evaluate({"z": Z[idx], "y": y[idx], "w": w, **params})
        loss = float(ev["loss"])
        if not np.isfinite(loss):
            raise ProbeTrainingDiverged(f"non-finite probe loss at step {step}")
        grads = tape.gradient(ev, "loss", list(params))
        opt.step(grads, lr=lr_at(step, cfg.steps, cfg.lr, cfg.warmup))
        running.append(loss)
        if (step + 1) % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append({"step": step + 1, "loss": float(np.mean(running))})
            log.info("probe %s step %d loss %.4f", site.name, step + 1, history[-1]["loss"])
            running = []
    for k, v in params.items():
        setattr(probe, k, v)
    return probe, history


def train_probe(
    model: TransformerModel,
    treebank: Sequence[DepTree],
    site: SubmoduleId | str,
    cfg: ProbeTrainConfig | None = None,
):
    """Probe for one residual-stream site trained on (gold state, oracle action) pairs."""
    site = SubmoduleId.parse(site) if isinstance(site, str) else site
    site.check(model.config)
    if not treebank:
        raise ValueError("empty treebank")
    feats, y, _ = state_dataset(model, treebank, [site])
    below, top = feats[site]
    return fit_probe(site, below, top, y, cfg)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def decode(n: int, choose) -> tuple[list[int], bool]:
    """Greedy parse: ``choose(state, legal)`` picks among legal actions whenever more than one exists.

    Returns the head list and whether decoding finished without running out of legal actions.
    """
    st = ParserState(n)
    for _ in range(2 * n + 1):
        if st.done:
            return st.finish(), True
        legal = st.legal()
        if not legal:
            return st.finish(), False
        st.apply(legal[0] if len(legal) == 1 else choose(st, legal))
    return st.finish(), st.done


def _attachment(gold: Sequence[int], pred: Sequence[int]) -> tuple[int, int, int]:
    uas = sum(int(g == p) for g, p in zip(gold, pred))
    gold_edges = {frozenset((d, h)) for d, h in enumerate(gold, start=1) if h}
    pred_edges = {frozenset((d, h)) for d, h in enumerate(pred, start=1) if h}
    return uas, len(gold_edges & pred_edges), len(gold_edges)


def eval_probe(
    probe: ActionProbe | None,
    model: TransformerModel,
    treebank: Sequence[DepTree],
    policy: str = "probe",
    seed: int = 0,
) -> dict:
    """UAS, UUAS and gold-state action accuracy under greedy legal decoding.

    ``policy`` is ``probe``, ``oracle`` (gold actions) or ``random`` (uniform over legal actions).
    """
    if policy not in ("probe", "oracle", "random"):
        raise ValueError(f"unknown policy {policy!r}")
    if policy == "probe" and probe is None:
        raise ValueError("policy 'probe' needs a probe")
    rng = np.random.default_rng(seed)
    acts = None
    if policy == "probe":
        acts = _site_acts(model, _tree_token_ids(model, treebank), [probe.site])[probe.site]
    tot_tok = tot_uas = tot_uedge = tot_edges = 0
    failures = 0
    correct = n_states = 0
    for k, t in enumerate(treebank):
        gold = list(t.heads)
        if policy == "oracle":
            st = ParserState(len(gold))
            for a in oracle_actions(gold):
                st.apply(a)
            pred, ok = st.finish(), st.done
        elif policy == "random":
            pred, ok = decode(len(gold), lambda st, legal: legal[rng.integers(len(legal))])
        else:
            h = acts[k]

            def choose(st, legal):
                p = probe_forward(probe, h[st.stack[-2] - 1], h[st.stack[-1] - 1])
                return max(legal, key=lambda a: (p[int(a)], -int(a)))

            pred, ok = decode(len(gold), choose)
            for st, a in oracle_states(gold):
                legal = st.legal()
                if len(st.stack) < 2:
                    continue
                p = probe_forward(probe, h[st.stack[-2] - 1], h[st.stack[-1] - 1])
                correct += int(max(legal, key=lambda x: (p[int(x)], -int(x))) == a)
                n_states += 1
        failures += int(not ok)
        u, ue, ne = _attachment(gold, pred)
        tot_uas += u
        tot_uedge += ue
        tot_edges += ne
        tot_tok += len(gold)
    out = {
        "policy": policy,
        "n_sentences": len(treebank),
        "uas": tot_uas / max(tot_tok, 1),
        "uuas": tot_uedge / max(tot_edges, 1) if tot_edges else 1.0,
        "parse_failures": failures,
    }
    if policy == "probe":
        out["site"] = probe.site.name
        out["action_accuracy"] = correct / max(n_states, 1)
        out["n_states"] = n_states
    return out


def probe_reading(model: TransformerModel, probes: Sequence[ActionProbe], stimuli: Sequence[Stimulus]) -> dict[str, dict]:
    """Action probabilities for the state with the verb's subtree under the final noun's on the stack.

    Per probe site: ``probs`` ``[N, 3]`` in ``Action`` order and their mean.
    """
    if model.tokenizer is None:
        raise ValueError("model has no tokenizer")
    sites = sorted({p.site for p in probes}, key=lambda s: s.order)
    ids = [model.tokenizer.encode(s.tokens) for s in stimuli]
    acts = _site_acts(model, ids, sites)
    out = {}
    for p in probes:
        h = acts[p.site]
        below = np.array([h[i][s.verb_position] for i, s in enumerate(stimuli)])
        top = np.array([h[i][s.final_noun_position] for i, s in enumerate(stimuli)])
        probs = probe_forward(p, below, top)
        out[p.site.name] = {
            "probs": probs,
            "mean": {a.name: float(probs[:, int(a)].mean()) for a in Action},
        }
    return out
