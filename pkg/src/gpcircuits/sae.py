"""ReLU sparse autoencoders over activation sites, their training, and splicing into a model."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .model import ActivationEdit, CleanContext, SubmoduleId, TransformerModel
from .numerics import kernels as K
from .numerics import companion, load_tensors, save_tensors

log = logging.getLogger(__name__)


@dataclass
class SaeParams:
    W_e: np.ndarray  # [d_features, d_model]
    b_e: np.ndarray  # [d_features]
    W_d: np.ndarray  # [d_model, d_features]
    b_d: np.ndarray  # [d_model]
    site: SubmoduleId | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f, d = np.shape(self.W_e)
        if np.shape(self.W_d) != (d, f) or np.shape(self.b_e) != (f,) or np.shape(self.b_d) != (d,):
            raise ValueError(
                f"inconsistent SAE shapes W_e{np.shape(self.W_e)} b_e{np.shape(self.b_e)} "
                f"W_d{np.shape(self.W_d)} b_d{np.shape(self.b_d)}"
            )

    @property
    def d_model(self) -> int:
        return self.W_e.shape[1]

    @property
    def d_features(self) -> int:
        return self.W_e.shape[0]

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1] != self.d_model:
            raise ValueError(f"activation width {x.shape[-1]} != d_model {self.d_model}")
        dt = np.result_type(x, np.float32)
        return K.sae_encode(x.astype(dt, copy=False), self.W_e.astype(dt), self.b_e.astype(dt), self.b_d.astype(dt))

    def decode(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        if f.shape[-1] != self.d_features:
            raise ValueError(f"feature width {f.shape[-1]} != d_features {self.d_features}")
        dt = np.result_type(f, np.float32)
        return K.sae_decode(f.astype(dt, copy=False), self.W_d.astype(dt), self.b_d.astype(dt))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_tensors(companion(path, ".sfct"), {"W_e": self.W_e, "b_e": self.b_e, "W_d": self.W_d, "b_d": self.b_d})
        side = {"site": self.site.name if self.site else None, "d_features": self.d_features, **self.meta}
        companion(path, ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SaeParams":
        path = Path(path)
        t = load_tensors(companion(path, ".sfct"))
        side = json.loads(companion(path, ".json").read_text())
        site = SubmoduleId.parse(side.pop("site")) if side.get("site") else None
        side.pop("site", None)
        side.pop("d_features", None)
        return cls(t["W_e"], t["b_e"], t["W_d"], t["b_d"], site, side)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class SaeTrainConfig:
    d_features: int = 1024
    sparsity_weight: float = 0.1
    lr: float = 1e-3
    warmup: int = 200
    steps: int = 4000
    batch_size: int = 512
    resample_every: int = 1000
    rng_seed: int = 0
    normalize: bool = True

    def check(self, d_model: int) -> None:
        if self.d_features < d_model:
            raise ValueError(f"d_features {self.d_features} < d_model {d_model}: dictionary must be overcomplete")
        if self.sparsity_weight < 0:
            raise ValueError("sparsity_weight must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")


class SaeTrainingDiverged(RuntimeError):
    pass


def sae_loss_and_grads(W_e, b_e, W_d, b_d, X, lam):
    """Mean over the batch of ||x - x̂||² + λ||f||₁, with gradients for every parameter."""
    B = X.shape[0]
    xc = X - b_d
    pre = xc @ W_e.T + b_e
    f = np.maximum(pre, 0)
    r = f @ W_d.T + b_d - X
    loss = float((r * r).sum() / B + lam * f.sum() / B)
    dxh = (2.0 / B) * r
    gW_d = dxh.T @ f
    gb_d = dxh.sum(axis=0)
    df = dxh @ W_d + lam / B
    dpre = df * (pre > 0)
    gW_e = dpre.T @ xc
    gb_e = dpre.sum(axis=0)
    gb_d = gb_d - dpre.sum(axis=0) @ W_e
    return loss, {"W_e": gW_e, "b_e": gb_e, "W_d": gW_d, "b_d": gb_d}, f, r


def sae_metrics(sae: SaeParams, X: np.ndarray, lam: float = 0.0, batch: int = 8192) -> dict:
    sse, sst, l0, l1, n = 0.0, 0.0, 0.0, 0.0, 0
    mu = X.mean(axis=0)
    for i in range(0, len(X), batch):
        x = X[i : i + batch].astype(np.float64)
        f = sae.encode(x)
        r = sae.decode(f) - x
        sse += float((r * r).sum())
        sst += float(((x - mu) ** 2).sum())
        l0 += float((f > 0).sum())
        l1 += float(f.sum())
        n += len(x)
    return {
        "mse": sse / n,
        "loss": (sse + lam * l1) / n,
        "l0": l0 / n,
        "variance_explained": 1.0 - sse / max(sst, 1e-30),
    }


def _unit_columns(W_d):
    n = np.linalg.norm(W_d, axis=0, keepdims=True)
    return W_d / np.maximum(n, 1e-12)


def train_sae(acts: np.ndarray, cfg: SaeTrainConfig | None = None, site: SubmoduleId | None = None) -> tuple[SaeParams, dict]:
    """Train one SAE on ``acts`` ``[N, d_model]`` with Adam and unit-norm decoder columns.

    With ``normalize`` the data is divided by its RMS norm during training and the
    scale folded back into the biases afterwards, so ``sparsity_weight`` is
    comparable across sites while decoder columns stay unit norm.
    """
    cfg = cfg or SaeTrainConfig()
    X = np.asarray(acts, dtype=np.float32)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("activations must be a non-empty [N, d_model] array")
    N, D = X.shape
    cfg.check(D)
    F = cfg.d_features
    rng = np.random.default_rng(cfg.rng_seed)
    mu = X.mean(axis=0)
    scale = float(np.sqrt(((X - mu) ** 2).sum(axis=1).mean())) if cfg.normalize else 1.0
    scale = scale if scale > 0 else 1.0
    Xn = X / np.float32(scale)

    W_d = _unit_columns(rng.normal(size=(D, F))).astype(np.float32)
    P = {
        "W_d": W_d,
        "W_e": (W_d.T * 0.5).astype(np.float32),
        "b_e": np.zeros(F, np.float32),
        "b_d": (mu / scale).astype(np.float32),
    }
    m = {k: np.zeros_like(v) for k, v in P.items()}
    v = {k: np.zeros_like(v) for k, v in P.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    last_active = np.zeros(F, dtype=np.int64)
    lam = np.float32(cfg.sparsity_weight)
    history = []
    running = []
    n_resampled = 0
    order = rng.permutation(N)
    cursor = 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > N:
            order = rng.permutation(N)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size] if N >= cfg.batch_size else rng.integers(0, N, cfg.batch_size)
        cursor += cfg.batch_size
        xb = Xn[idx]
        loss, g, f, r = sae_loss_and_grads(P["W_e"], P["b_e"], P["W_d"], P["b_d"], xb, lam)
        if not np.isfinite(loss):
            raise SaeTrainingDiverged(
                f"non-finite SAE loss at step {step}; max |W_e|={np.abs(P['W_e']).max():.3g}, "
                f"max |W_d|={np.abs(P['W_d']).max():.3g}, data scale={scale:.3g}"
            )
        running.append(loss)
        active = (f > 0).any(axis=0)
        last_active[active] = step
        # keep updates tangent to the unit-norm constraint on decoder columns
        g["W_d"] -= P["W_d"] * (g["W_d"] * P["W_d"]).sum(axis=0, keepdims=True)
        lr = cfg.lr * min(1.0, (step + 1) / max(cfg.warmup, 1))
        t = step + 1
        for k in ("W_e", "b_e", "W_d", "b_d"):
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] * g[k]
            P[k] -= (lr * (m[k] / (1 - b1**t)) / (np.sqrt(v[k] / (1 - b2**t)) + eps)).astype(np.float32)
        P["W_d"] = _unit_columns(P["W_d"]).astype(np.float32)

        if cfg.resample_every and t % cfg.resample_every == 0 and t < cfg.steps * 0.8:
            dead = np.flatnonzero(step - last_active >= cfg.resample_every)
            if len(dead):
                n_resampled += len(dead)
                _resample(P, m, v, dead, Xn, rng)
                last_active[dead] = step
        if t % 500 == 0 or t == cfg.steps:
            history.append({"step": t, "loss": float(np.mean(running))})
            log.info("sae %s step %d loss %.5f", site.name if site else "-", t, history[-1]["loss"])
            running = []

    sae = SaeParams(
        W_e=P["W_e"].copy(),
        b_e=P["b_e"] * np.float32(scale),
        W_d=P["W_d"].copy(),
        b_d=P["b_d"] * np.float32(scale),
        site=site,
        meta={"sparsity_weight": cfg.sparsity_weight, "scale": scale, "train": asdict(cfg)},
    )
    metrics = sae_metrics(sae, X, lam=cfg.sparsity_weight * scale)
    metrics.update({"history": history, "resampled": n_resampled, "scale": scale})
    dn = np.linalg.norm(sae.W_d, axis=0)
    if not np.all(np.isfinite(dn)) or np.any(dn == 0):
        raise SaeTrainingDiverged("decoder columns with zero or non-finite norm after training")
    return sae, metrics


def _resample(P, m, v, dead, Xn, rng, n_probe: int = 8192):
    """Point dead features at inputs the current dictionary reconstructs worst."""
    idx = rng.choice(len(Xn), size=min(n_probe, len(Xn)), replace=False)
    x = Xn[idx]
    f = np.maximum((x - P["b_d"]) @ P["W_e"].T + P["b_e"], 0)
    r = x - (f @ P["W_d"].T + P["b_d"])
    err = (r * r).sum(axis=1).astype(np.float64)
    if err.sum() <= 0:
        return
    pick = rng.choice(len(x), size=len(dead), replace=True, p=err / err.sum())
    dirs = r[pick]
    dirs = dirs / np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    alive = np.setdiff1d(np.arange(P["W_e"].shape[0]), dead)
    enc_norm = float(np.linalg.norm(P["W_e"][alive], axis=1).mean()) if len(alive) else 1.0
    P["W_d"][:, dead] = dirs.T
    P["W_e"][dead] = dirs * (0.2 * enc_norm)
    P["b_e"][dead] = 0.0
    for st in (m, v):
        st["W_d"][:, dead] = 0
        st["W_e"][dead] = 0
        st["b_e"][dead] = 0


# ---------------------------------------------------------------------------
# splicing
# ---------------------------------------------------------------------------


class SplicedModel:
    """A model with SAEs attached at some of its sites.

    Every spliced site outputs ``x_clean + (decode(encode(x)) - x̂_clean)``, which
    equals ``x̂ + ε`` with the reconstruction error ``ε`` frozen at its clean-run value.
    """

    def __init__(self, model: TransformerModel, saes: Mapping[SubmoduleId, SaeParams]):
        self.model = model
        self.saes = dict(saes)
        for sid in self.saes:
            sid.check(model.config)

    @property
    def config(self):
        return self.model.config

    @property
    def sites(self) -> list[SubmoduleId]:
        return sorted(self.saes, key=lambda s: s.order)

    def clean_context(self, tokens, dtype=np.float64) -> CleanContext:
        return self.model.clean_context(tokens, self.saes, dtype=dtype)

    def run(self, tokens, **kw):
        return self.model.run(tokens, saes=self.saes, **kw)

    def forward(self, tokens, dtype=np.float64) -> np.ndarray:
        return self.model.forward_with_edits(tokens, (), self.saes, dtype=dtype)

    def forward_with_edits(self, tokens, edits: Sequence[ActivationEdit] = (), positions=None, dtype=np.float64):
        return self.model.forward_with_edits(tokens, edits, self.saes, positions, dtype=dtype)

    def features(self, tokens, dtype=np.float64) -> dict[SubmoduleId, np.ndarray]:
        return self.clean_context(tokens, dtype=dtype).features


def splice(model: TransformerModel, saes: Iterable[SaeParams] | Mapping[SubmoduleId, SaeParams]) -> SplicedModel:
    """Attach one SAE per site; each SAE's ``site`` field names where it goes."""
    if isinstance(saes, Mapping):
        items = list(saes.items())
    else:
        items = []
        for s in saes:
            if s.site is None:
                raise ValueError("SAE has no site; pass a {site: sae} mapping instead")
            items.append((s.site, s))
    out: dict[SubmoduleId, SaeParams] = {}
    for sid, s in items:
        if sid in out:
            raise ValueError(f"two SAEs on site {sid.name}")
        if s.d_model != model.config.d_model:
            raise ValueError(f"SAE for {sid.name} has d_model {s.d_model}, model has {model.config.d_model}")
        out[sid] = s
    return SplicedModel(model, out)


def collect_activations(
    model: TransformerModel,
    corpus: Sequence[Sequence[int]],
    sites: Sequence[SubmoduleId],
    batch_size: int = 256,
    dtype=np.float32,
) -> dict[SubmoduleId, np.ndarray]:
    """Activations at every (non-padding) position of every sentence, in corpus order."""
    from .model import pad_batch

    chunks: dict[SubmoduleId, list] = {s: [] for s in sites}
    for i in range(0, len(corpus), batch_size):
        part = corpus[i : i + batch_size]
        toks = pad_batch(part)
        mask = np.arange(toks.shape[1])[None, :] < np.array([len(s) for s in part])[:, None]
        res = model.run(toks, dtype=np.float32)
        for s in sites:
            chunks[s].append(res.act(s.name)[mask].astype(dtype))
    return {s: np.concatenate(c) if c else np.zeros((0, model.config.d_model), dtype) for s, c in chunks.items()}
