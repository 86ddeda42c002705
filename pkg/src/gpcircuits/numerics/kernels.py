"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``GPCIRCUITS_DISABLE_NUMBA`` is unset (or ``0``). Both paths reduce
sequentially over the last axis in the numba case and with numpy's own
deterministic order otherwise; each path is bit-reproducible on its own, the
two paths agree to rounding.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("GPCIRCUITS_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:  # pragma: no cover - exercised implicitly
    if _DISABLED:
        raise ImportError("numba disabled by environment")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def _np_layernorm_fwd(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gamma + beta


def _np_layernorm_bwd(g, x, gamma):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    gh = g * gamma
    m1 = gh.mean(axis=-1, keepdims=True)
    m2 = (gh * xhat).mean(axis=-1, keepdims=True)
    return (gh - m1 - xhat * m2) * rstd


def _np_causal_softmax_fwd(s):
    t = s.shape[-1]
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    z = np.where(mask, -np.inf, s)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _np_softmax_bwd(g, p):
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def _np_gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _np_gelu_bwd(g, x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _np_sae_encode(x, w_e, b_e, b_d):
    return np.maximum((x - b_d) @ w_e.T + b_e, 0.0)


# ---------------------------------------------------------------------------
# numba path (2-D row kernels; callers flatten leading axes)
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_layernorm_fwd(x, gamma, beta, eps):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += x[i, j]
            mu = s / d
            v = 0.0
            for j in range(d):
                c = x[i, j] - mu
                v += c * c
            rstd = 1.0 / np.sqrt(v / d + eps)
            for j in range(d):
                out[i, j] = (x[i, j] - mu) * rstd * gamma[j] + beta[j]
        return out

    @njit(cache=True)
    def _nb_layernorm_bwd(g, x, gamma, eps):
        n, d = x.shape
        out = np.empty_like(x)
        xhat = np.empty(d, dtype=x.dtype)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += x[i, j]
            mu = s / d
            v = 0.0
            for j in range(d):
                c = x[i, j] - mu
                v += c * c
            rstd = 1.0 / np.sqrt(v / d + eps)
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                xhat[j] = (x[i, j] - mu) * rstd
                gh = g[i, j] * gamma[j]
                m1 += gh
                m2 += gh * xhat[j]
            m1 /= d
            m2 /= d
            for j in range(d):
                out[i, j] = (g[i, j] * gamma[j] - m1 - xhat[j] * m2) * rstd
        return out

    @njit(cache=True)
    def _nb_causal_softmax_fwd(s):
        n, t, _ = s.shape
        out = np.zeros_like(s)
        for b in range(n):
            for r in range(t):
                mx = s[b, r, 0]
                for c in range(1, r + 1):
                    if s[b, r, c] > mx:
                        mx = s[b, r, c]
                tot = 0.0
                for c in range(r + 1):
                    e = np.exp(s[b, r, c] - mx)
                    out[b, r, c] = e
                    tot += e
                for c in range(r + 1):
                    out[b, r, c] /= tot
        return out

    @njit(cache=True)
    def _nb_softmax_bwd(g, p):
        n, d = p.shape
        out = np.empty_like(p)
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * p[i, j]
            for j in range(d):
                out[i, j] = p[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def _nb_gelu_fwd(x, c):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x.flat[i]
            out.flat[i] = 0.5 * v * (1.0 + np.tanh(c * (v + 0.044715 * v * v * v)))
        return out

    @njit(cache=True)
    def _nb_gelu_bwd(g, x, c):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x.flat[i]
            t = np.tanh(c * (v + 0.044715 * v * v * v))
            du = c * (1.0 + 3 * 0.044715 * v * v)
            out.flat[i] = g.flat[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return out

    @njit(cache=True)
    def _nb_sparse_rows_matmul(a, w):
        n, k = a.shape
        d = w.shape[1]
        out = np.zeros((n, d), dtype=a.dtype)
        for i in range(n):
            for j in range(k):
                v = a[i, j]
                if v != 0.0:
                    for c in range(d):
                        out[i, c] += v * w[j, c]
        return out

    @njit(cache=True)
    def _nb_masked_matmul(g, wt, mask_src):
        n, d = g.shape
        k = wt.shape[0]
        out = np.zeros((n, k), dtype=g.dtype)
        for i in range(n):
            for j in range(k):
                if mask_src[i, j] > 0.0:
                    acc = 0.0
                    for c in range(d):
                        acc += g[i, c] * wt[j, c]
                    out[i, j] = acc
        return out


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------


def _rows(a):
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def layernorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        gamma = np.ascontiguousarray(gamma, dtype=x.dtype)
        beta = np.ascontiguousarray(beta, dtype=x.dtype)
        return _nb_layernorm_fwd(_rows(x), gamma, beta, LN_EPS).reshape(x.shape)
    return _np_layernorm_fwd(x, gamma, beta)


def layernorm_backward(g: np.ndarray, x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the layernorm input (gamma/beta grads are plain reductions)."""
    if HAVE_NUMBA:
        gamma = np.ascontiguousarray(gamma, dtype=x.dtype)
        return _nb_layernorm_bwd(_rows(g.astype(x.dtype, copy=False)), _rows(x), gamma, LN_EPS).reshape(x.shape)
    return _np_layernorm_bwd(g, x, gamma)


def causal_softmax_forward(s: np.ndarray) -> np.ndarray:
    """Softmax over the last axis of ``[..., T, T]`` scores with keys > query masked out."""
    if HAVE_NUMBA:
        t = s.shape[-1]
        flat = np.ascontiguousarray(s.reshape(-1, t, t))
        return _nb_causal_softmax_fwd(flat).reshape(s.shape)
    return _np_causal_softmax_fwd(s)


def softmax_backward(g: np.ndarray, p: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        return _nb_softmax_bwd(_rows(g.astype(p.dtype, copy=False)), _rows(p)).reshape(p.shape)
    return _np_softmax_bwd(g, p)


def gelu_forward(x: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        return _nb_gelu_fwd(np.ascontiguousarray(x), x.dtype.type(_GELU_C))
    return _np_gelu_fwd(x)


def gelu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        return _nb_gelu_bwd(np.ascontiguousarray(g, dtype=x.dtype), np.ascontiguousarray(x), x.dtype.type(_GELU_C))
    return _np_gelu_bwd(g, x)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sae_encode(x: np.ndarray, w_e: np.ndarray, b_e: np.ndarray, b_d: np.ndarray) -> np.ndarray:
    """ReLU(W_e (x - b_d) + b_e) with W_e stored as [d_features, d_model].

    Shared by the SAE module and the tape op so that clean-run codes are
    bit-identical to codes recomputed inside a spliced forward pass.
    """
    return _np_sae_encode(x, w_e, b_e, b_d)


def sparse_rows_matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``a @ w`` for a mostly-zero ``a`` (SAE codes); skips zero entries on the numba path."""
    if HAVE_NUMBA and a.dtype == w.dtype:
        lead = a.shape[:-1]
        out = _nb_sparse_rows_matmul(_rows(a), np.ascontiguousarray(w))
        return out.reshape(lead + (w.shape[1],))
    return a @ w


def masked_matmul(g: np.ndarray, w: np.ndarray, mask_src: np.ndarray) -> np.ndarray:
    """``g @ w`` evaluated only where ``mask_src > 0`` (zero elsewhere)."""
    if HAVE_NUMBA and g.dtype == w.dtype == mask_src.dtype:
        lead = g.shape[:-1]
        out = _nb_masked_matmul(_rows(g), np.ascontiguousarray(w.T), _rows(mask_src))
        return out.reshape(lead + (w.shape[1],))
    return np.where(mask_src > 0, g @ w, 0.0).astype(g.dtype, copy=False)


def sae_decode(f: np.ndarray, w_d: np.ndarray, b_d: np.ndarray) -> np.ndarray:
    """W_d f + b_d with W_d stored as [d_model, d_features]."""
    return sparse_rows_matmul(f, w_d.T) + b_d
