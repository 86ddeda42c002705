"""A static computation record with reverse-mode differentiation.

A :class:`Tape` is built once per input shape (see ``model.build_tape``) and
then evaluated many times with different inputs and activation overrides.
Gradients may be requested with respect to any recorded node, which is how
attribution reads ``dm/da`` at intermediate SAE features.

Sums in backward accumulation run in a fixed order (reverse node order, parent
order within a node), so repeated evaluations are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels as K

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


@dataclass(frozen=True)
class Override:
    """Replace (``mode="set"``) or perturb (``mode="add"``) part of a node's value.

    ``set`` overrides block gradient flow to the node's parents at the
    replaced elements; the gradient *at* the node is unaffected.
    """

    index: Any
    value: Any
    mode: str = "set"


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class Var:
    """Handle to a node on a tape; supports arithmetic for graph building."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def name(self) -> str | None:
        return self.tape.nodes[self.index].name

    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __neg__(self):
        return self.tape.neg(self)

    def __getitem__(self, key):
        return self.tape.slice(self, key)

    def __repr__(self) -> str:
        node = self.tape.nodes[self.index]
        return f"Var({self.index}, op={node.op!r}, name={node.name!r})"


# ---------------------------------------------------------------------------
# primitive forward / backward rules
# ---------------------------------------------------------------------------


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == tuple(shape):
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape(v) -> tuple[int, ...]:
    return np.shape(v)


def _matmul_bwd(g, out, vals, attrs, need=(True, True)):
    a, b = vals
    ga = gb = None
    if b.ndim == 2:
        if need[0]:
            ga = g @ b.T
        if need[1]:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        if need[0]:
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        if need[1]:
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


def _getitem_bwd(g, out, vals, attrs):
    (a,) = vals
    full = np.zeros(a.shape, dtype=g.dtype)
    full[attrs["key"]] = g
    return (full,)


def _take_fwd(a, *, indices, axis):
    return np.take(a, indices, axis=axis)


def _take_bwd(g, out, vals, attrs):
    (a,) = vals
    axis = attrs["axis"] % a.ndim
    full = np.zeros(a.shape, dtype=g.dtype)
    fm = np.moveaxis(full, axis, 0)
    np.add.at(fm, np.asarray(attrs["indices"]), np.moveaxis(g, axis, 0))
    return (full,)


def _embed_bwd(g, out, vals, attrs):
    w, ids = vals
    gw = np.zeros(w.shape, dtype=g.dtype)
    np.add.at(gw, ids.reshape(-1), g.reshape(-1, w.shape[-1]))
    return gw, None


def _gather_pos_fwd(x, pos):
    b = np.arange(x.shape[0])[:, None]
    return x[b, pos]


def _gather_pos_bwd(g, out, vals, attrs):
    x, pos = vals
    full = np.zeros(x.shape, dtype=g.dtype)
    b = np.broadcast_to(np.arange(x.shape[0])[:, None], pos.shape)
    np.add.at(full, (b, pos), g)
    return full, None


def _concat_bwd(g, out, vals, attrs):
    axis = attrs["axis"]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _sum_bwd(g, out, vals, attrs):
    (a,) = vals
    axis, keep = attrs["axis"], attrs["keepdims"]
    if axis is not None and not keep:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _mean_bwd(g, out, vals, attrs):
    (a,) = vals
    axis = attrs["axis"]
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return (_sum_bwd(g, out, vals, attrs)[0] / n,)


def _layernorm_fwd(x, gamma, beta):
    return K.layernorm_forward(x, gamma, beta)


def _layernorm_bwd(g, out, vals, attrs):
    x, gamma, beta = vals
    gx = K.layernorm_backward(g, x, gamma)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    xhat = xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + K.LN_EPS)
    red = tuple(range(x.ndim - 1))
    return gx, (g * xhat).sum(axis=red), g.sum(axis=red)


def _log_softmax_bwd(g, out, vals, attrs):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _xent_fwd(logits, targets, weights):
    lp = K.log_softmax(logits)
    nll = -np.take_along_axis(lp, targets[:, None], axis=-1)[:, 0]
    return np.asarray((nll * weights).sum() / weights.sum())


def _xent_bwd(g, out, vals, attrs):
    logits, targets, weights = vals
    p = K.softmax(logits)
    p[np.arange(len(targets)), targets] -= 1.0
    return p * (weights / weights.sum())[:, None] * g, None, None


def _sae_encode_bwd(g, out, vals, attrs, need=(True, True, True, True)):
    x, w_e, b_e, b_d = vals
    gp = g * (out > 0)
    gx = K.sparse_rows_matmul(gp, w_e) if (need[0] or need[3]) else None
    gp2 = gp.reshape(-1, gp.shape[-1])
    gw = gp2.T @ (x - b_d).reshape(-1, x.shape[-1]) if need[1] else None
    gbe = gp2.sum(axis=0) if need[2] else None
    gbd = -gx.reshape(-1, gx.shape[-1]).sum(axis=0) if need[3] else None
    return (gx if need[0] else None), gw, gbe, gbd


def _sae_decode_bwd(g, out, vals, attrs, need=(True, True, True)):
    f, w_d, b_d = vals
    g2 = g.reshape(-1, g.shape[-1])
    if need[0] == ACTIVE_ONLY:
        gf = K.masked_matmul(g, w_d, f)
    else:
        gf = g @ w_d if need[0] else None
    return (
        gf,
        g2.T @ f.reshape(-1, f.shape[-1]) if need[1] else None,
        g2.sum(axis=0) if need[2] else None,
    )


# name -> (forward(*vals, **attrs), backward(g, out, vals, attrs))
# backward rules listed in NEED_AWARE also take a per-parent ``need`` mask and skip unneeded gradients
OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda a, b: a + b, lambda g, o, v, at: (_unbroadcast(g, _shape(v[0])), _unbroadcast(g, _shape(v[1])))),
    "sub": (lambda a, b: a - b, lambda g, o, v, at: (_unbroadcast(g, _shape(v[0])), _unbroadcast(-g, _shape(v[1])))),
    "mul": (
        lambda a, b: a * b,
        lambda g, o, v, at: (_unbroadcast(g * v[1], _shape(v[0])), _unbroadcast(g * v[0], _shape(v[1]))),
    ),
    "neg": (lambda a: -a, lambda g, o, v, at: (-g,)),
    "scale": (lambda a, *, c: a * c, lambda g, o, v, at: (g * at["c"],)),
    "square": (lambda a: a * a, lambda g, o, v, at: (2.0 * v[0] * g,)),
    "exp": (np.exp, lambda g, o, v, at: (g * o,)),
    "log": (np.log, lambda g, o, v, at: (g / v[0],)),
    "relu": (lambda a: np.maximum(a, 0.0), lambda g, o, v, at: (g * (v[0] > 0),)),
    "gelu": (K.gelu_forward, lambda g, o, v, at: (K.gelu_backward(g, v[0]),)),
    "matmul": (lambda a, b: a @ b, _matmul_bwd),
    "sum": (lambda a, *, axis, keepdims: np.asarray(a.sum(axis=axis, keepdims=keepdims)), _sum_bwd),
    "mean": (lambda a, *, axis, keepdims: np.asarray(a.mean(axis=axis, keepdims=keepdims)), _mean_bwd),
    "reshape": (lambda a, *, shape: a.reshape(shape), lambda g, o, v, at: (g.reshape(v[0].shape),)),
    "transpose": (
        lambda a, *, axes: a.transpose(axes),
        lambda g, o, v, at: (g.transpose(np.argsort(at["axes"])),),
    ),
    "getitem": (lambda a, *, key: a[key], _getitem_bwd),
    "take": (_take_fwd, _take_bwd),
    "embed": (lambda w, ids: w[ids], _embed_bwd),
    "gather_positions": (_gather_pos_fwd, _gather_pos_bwd),
    "concat": (lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_bwd),
    "layernorm": (_layernorm_fwd, _layernorm_bwd),
    "softmax": (K.softmax, lambda g, o, v, at: (K.softmax_backward(g, o),)),
    "log_softmax": (K.log_softmax, _log_softmax_bwd),
    "causal_softmax": (K.causal_softmax_forward, lambda g, o, v, at: (K.softmax_backward(g, o),)),
    "cross_entropy": (_xent_fwd, _xent_bwd),
    "sae_encode": (K.sae_encode, _sae_encode_bwd),
    "sae_decode": (K.sae_decode, _sae_decode_bwd),
}

NEED_AWARE = {"matmul", "sae_encode", "sae_decode"}
# need-mask value: the parent's gradient is only consumed where the parent is positive
ACTIVE_ONLY = 2


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Evaluation:
    """Values of every node for one evaluation of a tape."""

    def __init__(self, tape: "Tape", values: list, set_masks: dict[int, list]):
        self.tape = tape
        self.values = values
        self.set_masks = set_masks

    def __getitem__(self, key) -> Tensor:
        return self.values[self.tape.resolve(key)]

    @property
    def named(self) -> dict[str, Tensor]:
        return {n.name: self.values[i] for i, n in enumerate(self.tape.nodes) if n.name is not None}


class Tape:
    """Ordered record of primitive operations plus a set of watched (named) nodes."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._names: dict[str, int] = {}

    # -- construction -----------------------------------------------------

    def _push(self, op: str, parents: Sequence[Var], name: str | None = None, **attrs) -> Var:
        idx = []
        for p in parents:
            if not isinstance(p, Var):
                p = self.constant(p)
            if p.tape is not self:
                raise ValueError("cannot mix nodes from different tapes")
            idx.append(p.index)
        self.nodes.append(Node(op, tuple(idx), attrs))
        v = Var(self, len(self.nodes) - 1)
        if name is not None:
            self.watch(v, name)
        return v

    def input(self, name: str, shape: Sequence[int | None] | None = None) -> Var:
        if name in self._names:
            raise ValueError(f"duplicate node name {name!r}")
        self.nodes.append(Node("input", (), {"name": name, "shape": None if shape is None else tuple(shape)}))
        v = Var(self, len(self.nodes) - 1)
        self.watch(v, name)
        return v

    def constant(self, value) -> Var:
        self.nodes.append(Node("const", (), {"value": np.asarray(value)}))
        return Var(self, len(self.nodes) - 1)

    def watch(self, v: Var, name: str) -> Var:
        if name in self._names and self._names[name] != v.index:
            raise ValueError(f"duplicate node name {name!r}")
        self.nodes[v.index].name = name
        self._names[name] = v.index
        return v

    def resolve(self, key) -> int:
        if isinstance(key, Var):
            return key.index
        if isinstance(key, str):
            return self._names[key]
        return int(key)

    def var(self, name: str) -> Var:
        return Var(self, self._names[name])

    @property
    def watched(self) -> list[str]:
        return list(self._names)

    def input_names(self) -> list[str]:
        return [n.attrs["name"] for n in self.nodes if n.op == "input"]

    # primitive builders
    def add(self, a, b, name=None):
        return self._push("add", (a, b), name)

    def sub(self, a, b, name=None):
        return self._push("sub", (a, b), name)

    def mul(self, a, b, name=None):
        return self._push("mul", (a, b), name)

    def neg(self, a, name=None):
        return self._push("neg", (a,), name)

    def scale(self, a, c: float, name=None):
        return self._push("scale", (a,), name, c=float(c))

    def square(self, a, name=None):
        return self._push("square", (a,), name)

    def exp(self, a, name=None):
        return self._push("exp", (a,), name)

    def log(self, a, name=None):
        return self._push("log", (a,), name)

    def relu(self, a, name=None):
        return self._push("relu", (a,), name)

    def gelu(self, a, name=None):
        return self._push("gelu", (a,), name)

    def matmul(self, a, b, name=None):
        return self._push("matmul", (a, b), name)

    def sum(self, a, axis=None, keepdims=False, name=None):
        return self._push("sum", (a,), name, axis=axis, keepdims=keepdims)

    def mean(self, a, axis=None, keepdims=False, name=None):
        return self._push("mean", (a,), name, axis=axis, keepdims=keepdims)

    def reshape(self, a, shape, name=None):
        return self._push("reshape", (a,), name, shape=tuple(shape))

    def transpose(self, a, axes, name=None):
        return self._push("transpose", (a,), name, axes=tuple(axes))

    def slice(self, a, key, name=None):
        return self._push("getitem", (a,), name, key=key)

    def take(self, a, indices, axis=-1, name=None):
        return self._push("take", (a,), name, indices=np.asarray(indices), axis=axis)

    def embed(self, w, ids, name=None):
        return self._push("embed", (w, ids), name)

    def gather_positions(self, x, pos, name=None):
        return self._push("gather_positions", (x, pos), name)

    def concat(self, xs, axis=-1, name=None):
        return self._push("concat", tuple(xs), name, axis=axis)

    def layernorm(self, x, gamma, beta, name=None):
        return self._push("layernorm", (x, gamma, beta), name)

    def softmax(self, a, name=None):
        return self._push("softmax", (a,), name)

    def log_softmax(self, a, name=None):
        return self._push("log_softmax", (a,), name)

    def causal_softmax(self, a, name=None):
        return self._push("causal_softmax", (a,), name)

    def cross_entropy(self, logits, targets, weights, name=None):
        return self._push("cross_entropy", (logits, targets, weights), name)

    def sae_encode(self, x, w_e, b_e, b_d, name=None):
        return self._push("sae_encode", (x, w_e, b_e, b_d), name)

    def sae_decode(self, f, w_d, b_d, name=None):
        return self._push("sae_decode", (f, w_d, b_d), name)

    # -- evaluation -------------------------------------------------------

    def _normalize_edits(self, edits) -> dict[int, list[Override]]:
        out: dict[int, list[Override]] = {}
        if not edits:
            return out
        for key, ovs in edits.items():
            if isinstance(ovs, Override):
                ovs = [ovs]
            out.setdefault(self.resolve(key), []).extend(ovs)
        return out

    def evaluate(
        self,
        inputs: Mapping[str, Any],
        edits: Mapping[Any, Override | Sequence[Override]] | None = None,
    ) -> Evaluation:
        """Run every recorded op on ``inputs``; ``edits`` override node values in flight."""
        edits_i = self._normalize_edits(edits)
        values: list = [None] * len(self.nodes)
        set_masks: dict[int, list] = {}
        for i, node in enumerate(self.nodes):
            if node.op == "input":
                name = node.attrs["name"]
                if name not in inputs:
                    raise KeyError(f"missing input {name!r}")
                val = np.asarray(inputs[name])
                decl = node.attrs["shape"]
                if decl is not None and (
                    len(decl) != val.ndim or any(d is not None and d != s for d, s in zip(decl, val.shape))
                ):
                    raise ShapeError(f"input {name!r}: declared shape {decl}, got {val.shape}")
            elif node.op == "const":
                val = node.attrs["value"]
            else:
                fwd = OPS[node.op][0]
                args = [values[p] for p in node.parents]
                kw = {k: v for k, v in node.attrs.items()}
                try:
                    val = fwd(*args, **kw)
                except (ValueError, IndexError) as exc:
                    shapes = [np.shape(a) for a in args]
                    raise ShapeError(
                        f"node {i} (op {node.op!r}, name {node.name!r}) rejected input shapes {shapes}: {exc}"
                    ) from exc
            if i in edits_i:
                val = np.array(val, copy=True)
                for ov in edits_i[i]:
                    if ov.mode == "set":
                        val[ov.index] = ov.value
                        set_masks.setdefault(i, []).append(ov.index)
                    elif ov.mode == "add":
                        val[ov.index] = val[ov.index] + ov.value
                    else:
                        raise ValueError(f"unknown override mode {ov.mode!r}")
            values[i] = val
        return Evaluation(self, values, set_masks)

    # -- differentiation --------------------------------------------------

    def vjp(self, ev: Evaluation, output, cotangent: Tensor, wrt: Iterable) -> dict:
        """Vector-Jacobian product of ``output`` with ``cotangent`` for each node in ``wrt``."""
        out_i = self.resolve(output)
        wrt_keys = list(wrt)
        wrt_i = [self.resolve(k) for k in wrt_keys]
        wrt_set = set(wrt_i)
        n = len(self.nodes)
        dep = [False] * n
        for i, node in enumerate(self.nodes):
            if i in wrt_set or any(dep[p] for p in node.parents):
                dep[i] = True
        grads: list = [None] * n
        out_val = ev.values[out_i]
        grads[out_i] = np.asarray(cotangent, dtype=np.result_type(out_val, np.float32)).reshape(np.shape(out_val))
        lo = min(wrt_i) if wrt_i else n
        for i in range(out_i, lo - 1, -1):
            g = grads[i]
            if g is None or not dep[i]:
                continue
            node = self.nodes[i]
            if node.op in ("input", "const"):
                continue
            if not any(dep[p] for p in node.parents):
                continue
            if i in ev.set_masks:
                g = np.array(g, copy=True)
                for idx in ev.set_masks[i]:
                    g[idx] = 0
            vals = [ev.values[p] for p in node.parents]
            if node.op in NEED_AWARE:
                need = tuple(dep[p] for p in node.parents)
                if node.op == "sae_decode" and need[0] and self._active_only(node.parents[0], wrt_set):
                    need = (ACTIVE_ONLY,) + need[1:]
                pg = OPS[node.op][1](g, ev.values[i], vals, node.attrs, need)
            else:
                pg = OPS[node.op][1](g, ev.values[i], vals, node.attrs)
            for p, gp in zip(node.parents, pg):
                if gp is None or not dep[p]:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
        result = {}
        for key, i in zip(wrt_keys, wrt_i):
            g = grads[i]
            if g is None:
                g = np.zeros(np.shape(ev.values[i]), dtype=np.result_type(ev.values[i], np.float32))
            result[key] = g
        return result

    def _active_only(self, f_index: int, wrt_set: set) -> bool:
        # codes from sae_encode pass gradient to their input only where positive,
        # so unless the codes themselves were requested only those entries matter
        return f_index not in wrt_set and self.nodes[f_index].op == "sae_encode"

    def gradient(self, ev: Evaluation, output, wrt: Iterable) -> dict:
        """d(output)/d(node) for each requested node; output must be a scalar."""
        val = ev.values[self.resolve(output)]
        if np.ndim(val) != 0:
            raise ValueError(f"gradient requires a scalar output, got shape {np.shape(val)}")
        return self.vjp(ev, output, np.ones((), dtype=np.result_type(val, np.float32)), wrt)

    def finite_difference_gradient(
        self,
        inputs: Mapping[str, Any],
        output,
        wrt,
        step: float = 1e-5,
        edits: Mapping | None = None,
    ) -> Tensor:
        """Central-difference estimate of d(output)/d(wrt), one element at a time."""
        if step <= 0:
            raise ValueError("step must be positive")
        wi = self.resolve(wrt)
        base = self.evaluate(inputs, edits)
        shape = np.shape(base.values[wi])
        out_i = self.resolve(output)
        if np.ndim(base.values[out_i]) != 0:
            raise ValueError("finite differences require a scalar output")
        grad = np.zeros(shape, dtype=np.float64)
        extra = self._normalize_edits(edits)
        for flat in range(int(np.prod(shape))):
            idx = np.unravel_index(flat, shape)
            vals = []
            for sgn in (1.0, -1.0):
                e = {k: list(v) for k, v in extra.items()}
                e.setdefault(wi, []).append(Override(idx, sgn * step, mode="add"))
                vals.append(float(self.evaluate(inputs, e).values[out_i]))
            grad[idx] = (vals[0] - vals[1]) / (2 * step)
        return grad
