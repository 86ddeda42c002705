"""Synthetic grammar with gold dependency trees, garden-path stimuli, and behavioral evaluation."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

STRUCTURES = ("NPZ", "NPS", "MVRR")
CONDITIONS = ("ambiguous", "gp", "non_gp")

LEXICON: dict[str, list[str]] = {
    "DET": ["the", "a"],
    "N": [
        "senator", "bill", "politician", "guitarist", "song", "woman", "mail", "man",
        "girl", "boy", "dog", "letter", "book", "child", "teacher", "doctor",
    ],
    "V_TRANS": ["rejected", "wrote", "took", "liked", "found"],
    "V_INTR": ["arrived", "slept", "smiled", "laughed", "fell"],
    "V_AMBI": ["signed", "attacked", "visited", "played", "watched"],
    "V_NPS": ["knew", "believed", "forgot"],
    "V_SONLY": ["said", "claimed", "hoped"],
    "V_PART": ["shown", "taken", "given"],
    "V_MVAMB": ["brought", "sent", "bought"],
    "COP": ["was"],
    "ADJ": ["happy", "sad", "late", "gone", "tired"],
    "SUB": ["after", "while", "when", "because"],
    "COMMA": [","],
    "PERIOD": ["."],
}

VERB_CLASSES = ("V_TRANS", "V_INTR", "V_AMBI", "V_NPS", "V_SONLY", "V_PART", "V_MVAMB")


@dataclass(frozen=True)
class Rule:
    rhs: tuple[str, ...]
    prob: float
    head: int  # index of the head child; other children attach to its head word


def _r(rhs: str, prob: float, head: int) -> Rule:
    return Rule(tuple(rhs.split()), prob, head)


DEFAULT_RULES: dict[str, list[Rule]] = {
    "S": [
        _r("CLAUSE PERIOD", 0.50, 0),
        _r("SUBORD CLAUSE_M PERIOD", 0.40, 1),
        _r("NP_RR PRED_WAS PERIOD", 0.10, 1),
    ],
    "CLAUSE": [_r("NP VP", 1.0, 1)],
    "VP": [
        _r("V_TRANS NP", 0.20, 0),
        _r("V_INTR", 0.15, 0),
        _r("V_AMBI NP", 0.14, 0),
        _r("V_AMBI", 0.06, 0),
        _r("V_NPS NP", 0.07, 0),
        _r("V_NPS CLAUSE_EMB", 0.13, 0),
        _r("V_SONLY CLAUSE_EMB", 0.10, 0),
        _r("PRED_WAS", 0.10, 0),
        _r("V_MVAMB NP", 0.05, 0),
    ],
    "PRED_WAS": [_r("COP ADJ", 1.0, 0)],
    "CLAUSE_M": [_r("NP VP_M", 1.0, 1)],
    "VP_M": [_r("PRED_WAS", 0.6, 0), _r("V_INTR", 0.2, 0), _r("V_TRANS NP", 0.2, 0)],
    "CLAUSE_EMB": [_r("NP PRED_WAS", 0.7, 1), _r("NP V_INTR", 0.3, 1)],
    "SUBORD": [
        _r("SUB NP V_TRANS NP COMMA", 0.300, 2),
        _r("SUB NP V_AMBI NP COMMA", 0.300, 2),
        _r("SUB NP V_AMBI COMMA", 0.065, 2),
        _r("SUB NP V_AMBI", 0.065, 2),
        _r("SUB NP V_INTR COMMA", 0.135, 2),
        _r("SUB NP V_INTR", 0.135, 2),
    ],
    "NP": [_r("DET N", 1.0, 1)],
    "NP_RR": [_r("NP RR", 1.0, 0)],
    "RR": [_r("V_PART NP", 0.7, 0), _r("V_MVAMB NP", 0.3, 0)],
}


@dataclass
class GrammarSpec:
    lexicon: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in LEXICON.items()})
    rules: dict[str, list[Rule]] = field(default_factory=lambda: dict(DEFAULT_RULES))
    start: str = "S"
    rng_seed: int = 0

    def validate(self) -> None:
        errors = []
        for nt, rules in self.rules.items():
            tot = sum(r.prob for r in rules)
            if abs(tot - 1.0) > 1e-9:
                errors.append(f"{nt}: rule probabilities sum to {tot}")
            for r in rules:
                if not 0 <= r.head < len(r.rhs):
                    errors.append(f"{nt} -> {' '.join(r.rhs)}: head index {r.head} out of range")
                for sym in r.rhs:
                    if sym not in self.rules and sym not in self.lexicon:
                        errors.append(f"{nt}: unknown symbol {sym}")
        if self.start not in self.rules:
            errors.append(f"start symbol {self.start} has no rules")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def words(self) -> list[str]:
        seen: dict[str, None] = {}
        for cls in self.lexicon:
            for w in self.lexicon[cls]:
                seen.setdefault(w, None)
        return list(seen)

    def word_class(self, word: str) -> str:
        for cls, ws in self.lexicon.items():
            if word in ws:
                return cls
        raise KeyError(word)


@dataclass
class DepTree:
    """Tokens with 1-based heads (0 = root)."""

    tokens: list[str]
    heads: list[int]

    def __post_init__(self):
        if len(self.tokens) != len(self.heads):
            raise ValueError("tokens and heads differ in length")

    def __len__(self) -> int:
        return len(self.tokens)

    def arcs(self) -> set[tuple[int, int]]:
        return {(h, d + 1) for d, h in enumerate(self.heads)}

    def validate(self) -> None:
        n = len(self.heads)
        roots = [i for i, h in enumerate(self.heads) if h == 0]
        if len(roots) != 1:
            raise ValueError(f"tree must have exactly one root, found {len(roots)}")
        for i, h in enumerate(self.heads):
            if not 0 <= h <= n or h == i + 1:
                raise ValueError(f"bad head {h} for token {i + 1}")
        for i in range(n):
            seen = set()
            j = i + 1
            while j != 0:
                if j in seen:
                    raise ValueError("cycle in dependency tree")
                seen.add(j)
                j = self.heads[j - 1]


def _expand(grammar: GrammarSpec, sym: str, rng: np.random.Generator, out: list, heads: list) -> int:
    """Append the words under ``sym`` to ``out``; return the 1-based index of its head word."""
    if sym in grammar.lexicon:
        words = grammar.lexicon[sym]
        out.append(words[int(rng.integers(len(words)))])
        heads.append(-1)
        return len(out)
    rules = grammar.rules[sym]
    probs = np.array([r.prob for r in rules])
    rule = rules[int(rng.choice(len(rules), p=probs / probs.sum()))]
    child_heads = [_expand(grammar, s, rng, out, heads) for s in rule.rhs]
    h = child_heads[rule.head]
    for i, ch in enumerate(child_heads):
        if i != rule.head:
            heads[ch - 1] = h
    return h


def generate_sentence(grammar: GrammarSpec, rng: np.random.Generator) -> DepTree:
    toks: list[str] = []
    heads: list[int] = []
    root = _expand(grammar, grammar.start, rng, toks, heads)
    heads[root - 1] = 0
    return DepTree(toks, heads)


def generate_corpus(grammar: GrammarSpec | None = None, n_sentences: int = 20000, seed: int | None = None) -> list[DepTree]:
    grammar = grammar or GrammarSpec()
    grammar.validate()
    rng = np.random.default_rng(grammar.rng_seed if seed is None else seed)
    return [generate_sentence(grammar, rng) for _ in range(n_sentences)]


def expected_symbol_counts(grammar: GrammarSpec) -> dict[str, float]:
    """Expected number of occurrences of every symbol per sentence, solved from the rule probabilities."""
    nts = list(grammar.rules)
    syms = nts + [c for c in grammar.lexicon if c not in grammar.rules]
    idx = {s: i for i, s in enumerate(syms)}
    n = len(syms)
    # M[i, j]: expected count of symbol j produced directly by one expansion of nonterminal i
    M = np.zeros((n, n))
    for nt in nts:
        for r in grammar.rules[nt]:
            for s in r.rhs:
                M[idx[nt], idx[s]] += r.prob
    start = np.zeros(n)
    start[idx[grammar.start]] = 1.0
    # counts c satisfy c = start + Mᵀ c
    c = np.linalg.solve(np.eye(n) - M.T, start)
    return {s: float(c[idx[s]]) for s in syms}


def verb_class_shares(grammar: GrammarSpec, classes: Sequence[str] = VERB_CLASSES) -> dict[str, float]:
    counts = expected_symbol_counts(grammar)
    tot = sum(counts[c] for c in classes)
    return {c: counts[c] / tot for c in classes}


def observed_class_shares(corpus: Iterable[DepTree], grammar: GrammarSpec, classes: Sequence[str] = VERB_CLASSES) -> dict[str, float]:
    word_cls = {w: c for c in classes for w in grammar.lexicon[c]}
    cnt: Counter = Counter()
    for t in corpus:
        for w in t.tokens:
            if w in word_cls:
                cnt[word_cls[w]] += 1
    tot = sum(cnt.values()) or 1
    return {c: cnt[c] / tot for c in classes}


# ---------------------------------------------------------------------------
# garden-path stimuli
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GardenPathTemplate:
    structure: str
    frame: tuple[str, ...]  # surface words, with "{V}" marking the verb slot
    verbs: tuple[str, str, str]  # (ambiguous, gp-forcing, non-gp-forcing)
    gp_token: str
    nongp_token: str

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.gp_token == self.nongp_token:
            raise ValueError("gp_token and nongp_token must differ")
        if self.frame.count("{V}") != 1:
            raise ValueError("frame needs exactly one {V} slot")
        lens = {len(v.split()) for v in self.verbs}
        if len(lens) != 1:
            raise ValueError(f"verb triple {self.verbs} has unequal token counts")

    @property
    def verb_index(self) -> int:
        return self.frame.index("{V}")

    @property
    def noun_index(self) -> int:
        n_extra = len(self.verbs[0].split()) - 1
        return len(self.frame) - 1 + n_extra

    def instantiate(self, item: int = 0) -> list["Stimulus"]:
        out = []
        for cond, verb in zip(CONDITIONS, self.verbs):
            toks = []
            for w in self.frame:
                toks.extend(verb.split() if w == "{V}" else [w])
            out.append(
                Stimulus(
                    tokens=tuple(toks),
                    structure=self.structure,
                    condition=cond,
                    verb_position=self.verb_index,
                    final_noun_position=self.noun_index,
                    gp_token=self.gp_token,
                    nongp_token=self.nongp_token,
                    item=item,
                )
            )
        return out


@dataclass(frozen=True)
class Stimulus:
    tokens: tuple[str, ...]
    structure: str
    condition: str
    verb_position: int
    final_noun_position: int
    gp_token: str
    nongp_token: str
    item: int = 0

    def __post_init__(self):
        n = len(self.tokens)
        if not (0 <= self.verb_position < n and 0 <= self.final_noun_position < n):
            raise ValueError("annotated positions outside the stimulus")
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    @property
    def positions(self) -> dict[str, int]:
        return {"verb": self.verb_position, "final_noun": self.final_noun_position}


# verb class triples and continuation tokens per structure
STRUCTURE_SPECS = {
    "NPZ": {"verbs": ("V_AMBI", "V_TRANS", "V_INTR"), "gp": ",", "nongp": "was", "prefix": ("SUB",)},
    "NPS": {"verbs": ("V_NPS", "V_TRANS", "V_SONLY"), "gp": ".", "nongp": "was", "prefix": ()},
    "MVRR": {"verbs": ("V_MVAMB", "V_TRANS", "V_PART"), "gp": ".", "nongp": "was", "prefix": ()},
}


def make_templates(
    grammar: GrammarSpec | None = None,
    n_per_structure: int = 24,
    structures: Sequence[str] = STRUCTURES,
    seed: int = 0,
) -> list[GardenPathTemplate]:
    """Draw distinct templates per structure: [SUB] the N1 V the N2 with verbs from matching classes."""
    grammar = grammar or GrammarSpec()
    lex = grammar.lexicon
    rng = np.random.default_rng(seed)
    out = []
    for st in structures:
        spec = STRUCTURE_SPECS[st]
        seen = set()
        tries = 0
        while sum(t.structure == st for t in out) < n_per_structure:
            tries += 1
            if tries > 100 * n_per_structure + 1000:
                raise ValueError(f"cannot draw {n_per_structure} distinct {st} templates from the lexicon")
            pre = tuple(lex[c][int(rng.integers(len(lex[c])))] for c in spec["prefix"])
            n1, n2 = rng.choice(len(lex["N"]), size=2, replace=False)
            verbs = tuple(lex[c][int(rng.integers(len(lex[c])))] for c in spec["verbs"])
            key = (pre, int(n1), int(n2), verbs)
            if key in seen:
                continue
            seen.add(key)
            frame = pre + ("the", lex["N"][n1], "{V}", "the", lex["N"][n2])
            out.append(GardenPathTemplate(st, frame, verbs, spec["gp"], spec["nongp"]))
    return out


def generate_stimuli(
    templates: Sequence[GardenPathTemplate] | None = None,
    grammar: GrammarSpec | None = None,
    n_per_structure: int = 24,
    structures: Sequence[str] = STRUCTURES,
    seed: int = 0,
) -> list[Stimulus]:
    if templates is None:
        templates = make_templates(grammar, n_per_structure, structures, seed)
    out = []
    for i, t in enumerate(templates):
        out.extend(t.instantiate(item=i))
    return out


def select(stimuli: Iterable[Stimulus], structure: str | None = None, condition: str | None = None) -> list[Stimulus]:
    return [
        s for s in stimuli if (structure is None or s.structure == structure) and (condition is None or s.condition == condition)
    ]


STIMULUS_COLUMNS = ["structure", "condition", "text", "verb_index", "noun_index", "gp_token", "nongp_token"]


def write_stimuli_tsv(stimuli: Sequence[Stimulus], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar="\\")
        w.writerow(STIMULUS_COLUMNS)
        for s in stimuli:
            w.writerow([s.structure, s.condition, s.text, s.verb_position, s.final_noun_position, s.gp_token, s.nongp_token])


def read_stimuli_tsv(path: str | Path, vocab: Iterable[str] | None = None) -> list[Stimulus]:
    vocab = set(vocab) if vocab is not None else None
    out = []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE, escapechar="\\"))
    item = -1
    for row in rows:
        toks = tuple(row["text"].split())
        if row["condition"] == "ambiguous" or item < 0:
            item += 1
        if vocab is not None:
            bad = [t for t in toks + (row["gp_token"], row["nongp_token"]) if t not in vocab]
            if bad:
                raise KeyError(f"stimulus tokens not in vocabulary: {bad}")
        out.append(
            Stimulus(
                tokens=toks,
                structure=row["structure"],
                condition=row["condition"],
                verb_position=int(row["verb_index"]),
                final_noun_position=int(row["noun_index"]),
                gp_token=row["gp_token"],
                nongp_token=row["nongp_token"],
                item=item,
            )
        )
    return out


def write_treebank(trees: Iterable[DepTree], path: str | Path) -> None:
    with open(path, "w") as fh:
        for t in trees:
            for i, (w, h) in enumerate(zip(t.tokens, t.heads)):
                fh.write(f"{i + 1}\t{w}\t{h}\n")
            fh.write("\n")


def read_treebank(path: str | Path) -> list[DepTree]:
    trees, toks, heads = [], [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            if toks:
                trees.append(DepTree(toks, heads))
                toks, heads = [], []
            continue
        idx, form, head = line.split("\t")[:3]
        if int(idx) != len(toks) + 1:
            raise ValueError(f"treebank index {idx} out of order")
        toks.append(form)
        heads.append(int(head))
    if toks:
        trees.append(DepTree(toks, heads))
    return trees


def write_corpus(trees: Iterable[DepTree], path: str | Path) -> None:
    Path(path).write_text("".join(" ".join(t.tokens) + "\n" for t in trees))


def read_corpus(path: str | Path) -> list[list[str]]:
    return [line.split() for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# behavioral evaluation
# ---------------------------------------------------------------------------


def sem(x: Sequence[float]) -> float:
    """Standard error of the mean using the population standard deviation."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return float("nan")
    return float(x.std() / math.sqrt(len(x)))


def group_by_shape(stimuli: Sequence[Stimulus]) -> dict[tuple, list[int]]:
    """Indices of stimuli sharing length and annotated positions (so they batch together)."""
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(stimuli):
        groups.setdefault((len(s.tokens), s.verb_position, s.final_noun_position), []).append(i)
    return groups


def continuation_probs(model, stimuli: Sequence[Stimulus], dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """p(gp_token) and p(nongp_token) at the last position of each stimulus."""
    from .numerics.kernels import softmax

    tok = model.tokenizer
    p_gp = np.zeros(len(stimuli))
    p_ng = np.zeros(len(stimuli))
    for _, idx in sorted(group_by_shape(stimuli).items()):
        ids = np.array([tok.encode(stimuli[i].tokens) for i in idx])
        probs = softmax(model.run(ids, dtype=dtype).logits[:, -1, :])
        for j, i in enumerate(idx):
            p_gp[i] = probs[j, tok.token_id(stimuli[i].gp_token)]
            p_ng[i] = probs[j, tok.token_id(stimuli[i].nongp_token)]
    return p_gp, p_ng


@dataclass
class BehavioralRow:
    structure: str
    condition: str
    n: int
    p_gp: float
    p_nongp: float
    diff: float
    sem: float

    def as_tsv(self) -> str:
        return f"{self.structure}\t{self.condition}\t{self.n}\t{self.p_gp:.6f}\t{self.p_nongp:.6f}\t{self.diff:.6f}\t{self.sem:.6f}"


BEHAVIORAL_HEADER = "structure\tcondition\tn\tp_gp\tp_nongp\tdiff\tsem"


def behavioral_eval(model, stimuli: Sequence[Stimulus]) -> list[BehavioralRow]:
    if model.tokenizer is None:
        raise ValueError("model has no tokenizer")
    vocab = set(model.tokenizer.vocab)
    for s in stimuli:
        bad = [t for t in s.tokens + (s.gp_token, s.nongp_token) if t not in vocab]
        if bad:
            raise KeyError(f"stimulus tokens not in vocabulary: {bad}")
    p_gp, p_ng = continuation_probs(model, stimuli)
    rows = []
    for st in STRUCTURES:
        for cond in CONDITIONS:
            idx = [i for i, s in enumerate(stimuli) if s.structure == st and s.condition == cond]
            if not idx:
                continue
            d = p_gp[idx] - p_ng[idx]
            rows.append(BehavioralRow(st, cond, len(idx), float(p_gp[idx].mean()), float(p_ng[idx].mean()), float(d.mean()), sem(d)))
    return rows


def format_behavioral(rows: Sequence[BehavioralRow]) -> str:
    return BEHAVIORAL_HEADER + "\n" + "".join(r.as_tsv() + "\n" for r in rows)


def memorization_corpus(grammar: GrammarSpec | None = None, n: int = 50, length: int = 8, seed: int = 0) -> list[list[str]]:
    """``n`` word sequences whose first words are pairwise distinct, so each is fully determined by its first token."""
    grammar = grammar or GrammarSpec()
    words = grammar.words
    if n > len(words):
        raise ValueError(f"need {n} distinct first words, lexicon has {len(words)}")
    rng = np.random.default_rng(seed)
    firsts = rng.choice(len(words), size=n, replace=False)
    return [[words[f]] + [words[int(j)] for j in rng.integers(len(words), size=length - 1)] for f in firsts]
