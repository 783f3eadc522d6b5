"""Reverse-mode autodiff over float64 numpy arrays.

Design: an explicit tape. Ops execute eagerly in numpy and, when a tape is
active, append a node (parent indices + pullback closure) to it. backward()
walks the recorded nodes once in reverse and accumulates cotangents, so
gradient evaluation order is deterministic by construction.

Outside a `with tape():` block ops are plain numpy with no recording, which
is what finite-difference checking and inference use.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError, NumericsError

_active_tape: "Tape | None" = None


class Tape:
    """Ordered record of one forward pass."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def add_leaf(self, t: "Tensor") -> int:
        self.nodes.append(_Node((), None, t))
        return len(self.nodes) - 1

    def add_op(self, parents: tuple[int, ...], pullback, t: "Tensor") -> int:
        self.nodes.append(_Node(parents, pullback, t))
        return len(self.nodes) - 1


class _Node:
    __slots__ = ("parents", "pullback", "tensor")

    def __init__(self, parents, pullback, tensor):
        self.parents = parents
        self.pullback = pullback
        self.tensor = tensor


@contextmanager
def tape():
    global _active_tape
    prev = _active_tape
    _active_tape = Tape()
    try:
        yield _active_tape
    finally:
        _active_tape = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        # np.array (not ascontiguousarray, which promotes 0-d to 1-d) so
        # scalars keep shape () and the tensor owns its buffer
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _ensure_finite(arr, op: str):
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite value produced by {op}")


def _register(t: Tensor, tp: Tape) -> int:
    if t._tape is not tp:
        t._tape = tp
        t._node = tp.add_leaf(t)
    return t._node


def _record(out_data, inputs: tuple[Tensor, ...], pullback, op: str) -> Tensor:
    _ensure_finite(out_data, op)
    tp = _active_tape
    needs = False
    if tp is not None:
        for i in inputs:
            if i.requires_grad:
                needs = True
                break
    # op results skip Tensor.__init__: no defensive copy, since every op
    # hands over an array it just computed (views of parent data included,
    # which stay read-only for the life of the tape)
    out = Tensor.__new__(Tensor)
    out.data = out_data if isinstance(out_data, np.ndarray) else np.asarray(out_data)
    out.requires_grad = needs
    out.grad = None
    out._tape = None
    out._node = -1
    if needs:
        parents = tuple(_register(i, tp) for i in inputs)
        out._tape = tp
        out._node = tp.add_op(parents, pullback, out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Seed d(loss)/d(loss)=1 and accumulate grads into every
    requires_grad leaf reachable from the loss. Intermediate op results
    do not retain grads. Grads add across calls."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss is not attached to a tape (was it computed under `with tape():`?)")
    tp = loss._tape
    grads: list[np.ndarray | None] = [None] * (loss._node + 1)
    grads[loss._node] = np.ones_like(loss.data)
    for i in range(loss._node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = tp.nodes[i]
        if node.pullback is None:
            t = node.tensor
            if t.requires_grad:
                # copy: a pullback may hand the same array to two parents
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = node.pullback(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if not tp.nodes[p].tensor.requires_grad:
                continue
            # no pullback mutates its returned array afterwards, and
            # accumulation below always allocates, so aliasing g is safe
            grads[p] = pg if grads[p] is None else grads[p] + pg


def zero_grads(params) -> None:
    vals = params.values() if isinstance(params, dict) else params
    for p in vals:
        p.grad = None


# ---------------------------------------------------------------- basic ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    ash, bsh = a.shape, b.shape

    def pull(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _record(out, (a, b), pull, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    ash, bsh = a.shape, b.shape

    def pull(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _record(out, (a, b), pull, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def pull(g):
        return _unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)

    return _record(out, (a, b), pull, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    bd, y = b.data, out
    ash, bsh = a.shape, b.shape

    def pull(g):
        return _unbroadcast(g / bd, ash), _unbroadcast(-g * y / bd, bsh)

    return _record(out, (a, b), pull, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def pull(g):
        return (-g,)

    return _record(-a.data, (a,), pull, "neg")


def power(a, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = a.data**p
    ad = a.data

    def pull(g):
        return (g * p * ad ** (p - 1.0),)

    return _record(out, (a,), pull, "power")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)

    def pull(g):
        return (g * y,)

    return _record(y, (a,), pull, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    ad = a.data

    def pull(g):
        return (g / ad,)

    return _record(y, (a,), pull, "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    y = np.sqrt(a.data)

    def pull(g):
        return (g / (2.0 * y),)

    return _record(y, (a,), pull, "sqrt")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def pull(g):
        return (g * (1.0 - y * y),)

    return _record(y, (a,), pull, "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def pull(g):
        return (g * mask,)

    return _record(a.data * mask, (a,), pull, "relu")


def sigmoid(a) -> Tensor:
    """Numerically stable logistic: no exp of a large positive argument."""
    a = _as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def pull(g):
        return (g * y * (1.0 - y),)

    return _record(y, (a,), pull, "sigmoid")


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x), with the erf form."""
    a = _as_tensor(a)
    x = a.data
    phi_cdf = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))
    y = x * phi_cdf
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)

    def pull(g):
        return (g * (phi_cdf + x * pdf),)

    return _record(y, (a,), pull, "gelu")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def pull(g):
        ga = g @ bd.T if need_a else None
        gb = ad.T @ g if need_b else None
        return ga, gb

    return _record(ad @ bd, (a, b), pull, "matmul")


def affine(x, w, b) -> Tensor:
    """x @ w + b in one tape node. The encoder calls this on every linear
    layer, so fusing the bias add roughly halves its tape traffic."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"affine expects 2-d operands, got {x.shape} @ {w.shape}")
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine shapes disagree: {x.shape} @ {w.shape} + {b.shape}")
    xd, wd = x.data, w.data
    need_x, need_w = x.requires_grad, w.requires_grad

    def pull(g):
        gx = g @ wd.T if need_x else None
        gw = xd.T @ g if need_w else None
        return gx, gw, g.sum(axis=0)

    return _record(xd @ wd + b.data, (x, w, b), pull, "affine")




def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {a.shape}")

    def pull(g):
        return (np.ascontiguousarray(g.T),)

    return _record(np.ascontiguousarray(a.data.T), (a,), pull, "transpose")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def pull(g):
        return (g.reshape(old),)

    return _record(a.data.reshape(shape), (a,), pull, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of zero tensors")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)

    def pull(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _record(out, tuple(ts), pull, "concat")


def stack(tensors) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("stack of zero tensors")
    out = np.stack([t.data for t in ts], axis=0)

    def pull(g):
        return tuple(np.ascontiguousarray(g[i]) for i in range(len(ts)))

    return _record(out, tuple(ts), pull, "stack")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def pull(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), pull, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    denom = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def pull(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy() / denom,)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy() / denom,)

    return _record(out, (a,), pull, "mean")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def pull(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(y, (a,), pull, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def pull(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record(y, (a,), pull, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize along the last axis with population variance."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def pull(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbias = g.sum(axis=lead) if lead else g.copy()
        return dx, dgain, dbias

    return _record(y, (x, gain, bias), pull, "layer_norm")


def cumsum(a) -> Tensor:
    """Inclusive prefix sum of a 1-d tensor."""
    a = _as_tensor(a)
    if a.ndim != 1:
        raise DimensionError(f"cumsum expects a 1-d tensor, got {a.shape}")

    def pull(g):
        return (np.cumsum(g[::-1])[::-1].copy(),)

    return _record(np.cumsum(a.data), (a,), pull, "cumsum")


def gather_rows(table, idx) -> Tensor:
    """Row lookup table[idx]; gradient scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(idx, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"gather_rows expects 1-d indices, got shape {ids.shape}")
    if table.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-d table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"gather_rows index out of range for table with {table.shape[0]} rows")
    tsh = table.shape

    def pull(g):
        gt = np.zeros(tsh)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(table.data[ids], (table,), pull, "gather_rows")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"slice_cols expects a 2-d tensor, got {a.shape}")
    sh = a.shape

    def pull(g):
        gx = np.zeros(sh)
        gx[:, start:stop] = g
        return (gx,)

    return _record(np.ascontiguousarray(a.data[:, start:stop]), (a,), pull, "slice_cols")


def causal_windows(a, w: int) -> Tensor:
    """Row t becomes the concatenation of rows t-w+1 .. t, zero-padded on
    the left, giving shape (L, w*d)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"causal_windows expects a 2-d tensor, got {a.shape}")
    if w < 1:
        raise ContractError(f"window must be >= 1, got {w}")
    L, d = a.shape
    padded = np.concatenate([np.zeros((w - 1, d)), a.data], axis=0)
    out = np.concatenate([padded[j : j + L] for j in range(w)], axis=1)

    def pull(g):
        gpad = np.zeros((L + w - 1, d))
        for j in range(w):
            gpad[j : j + L] += g[:, j * d : (j + 1) * d]
        return (np.ascontiguousarray(gpad[w - 1 :]),)

    return _record(out, (a,), pull, "causal_windows")


def triangle_assign(s, k_max: int) -> Tensor:
    """A[t, k] = max(0, 1 - |s_t - k|): unit-width triangle kernel placing
    position t's mass over slots around its cumulative boundary count."""
    s = _as_tensor(s)
    if s.ndim != 1:
        raise DimensionError(f"triangle_assign expects a 1-d tensor, got {s.shape}")
    if k_max < 1:
        raise ContractError(f"k_max must be >= 1, got {k_max}")
    diff = s.data[:, None] - np.arange(k_max)[None, :]
    A = np.maximum(0.0, 1.0 - np.abs(diff))

    def pull(g):
        active = np.abs(diff) < 1.0
        return ((g * active * -np.sign(diff)).sum(axis=1),)

    return _record(A, (s,), pull, "triangle_assign")


def pool_mean(a, emb, stabilizer: float = 1e-8) -> Tensor:
    """Occupancy-normalized pooling, fused:
    token_k = sum_t a[t,k] emb_t / (sum_t a[t,k] + stabilizer)."""
    a, emb = _as_tensor(a), _as_tensor(emb)
    if a.ndim != 2 or emb.ndim != 2 or a.shape[0] != emb.shape[0]:
        raise DimensionError(f"pool_mean expects (L,K)/(L,d) operands, got {a.shape}/{emb.shape}")
    denom = a.data.sum(axis=0) + stabilizer  # (K,)
    y = (a.data.T @ emb.data) / denom[:, None]
    ad, ed = a.data, emb.data

    def pull(g):
        dw = g / denom[:, None]
        ds = -(g * y).sum(axis=-1) / denom
        return ed @ dw.T + ds[None, :], ad @ dw

    return _record(y, (a, emb), pull, "pool_mean")


def break_probs(logits, threshold) -> Tensor:
    """Boundary probabilities in one node: sigma(logit_t - T) for t >= 1,
    with position 0 forced to 0 (a stream always begins inside segment 0)."""
    logits, threshold = _as_tensor(logits), _as_tensor(threshold)
    if logits.ndim != 1:
        raise DimensionError(f"logits must be 1-d, got {logits.shape}")
    x = logits.data - float(threshold.data.reshape(()))
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    y[0] = 0.0
    tsh = threshold.shape

    def pull(g):
        dx = g * y * (1.0 - y)  # y[0] = 0 zeroes the pinned position
        return dx, np.full(tsh, -dx.sum())

    return _record(y, (logits, threshold), pull, "break_probs")


# ---------------------------------------------------- finite-difference check


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    worst_param: str = ""
    worst_index: int = -1
    max_rel_err: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def summary(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"grad check {verdict}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.tol:.1e}, eps {self.eps:.1e}) at "
            f"{self.worst_param}[{self.worst_index}]"
        )


def finite_diff_check(
    f,
    params: dict[str, Tensor],
    eps: float = 1e-4,
    tol: float = 1e-4,
    sample_per_param: int | None = None,
    sample_seed: int = 0,
) -> GradCheckReport:
    """Compare autodiff grads of scalar-valued f() against central
    differences for every scalar entry of every param.

    f is called with no arguments and must be deterministic: two baseline
    evaluations are compared bit-for-bit first and any difference is a
    contract error. Perturbed evaluations run without a tape.

    sample_per_param=None checks every coordinate. A positive value checks
    at most that many seeded-random coordinates per parameter (params that
    fit entirely are still swept in full), which keeps large models inside
    a time budget while the checked set stays reproducible.
    """
    if sample_per_param is not None and sample_per_param < 1:
        raise ContractError(f"sample_per_param must be None or >= 1, got {sample_per_param}")
    base1 = f()
    base2 = f()
    if not isinstance(base1, Tensor) or base1.size != 1:
        raise ContractError("finite_diff_check needs f() -> scalar Tensor")
    if base1.data.tobytes() != base2.data.tobytes():
        raise ContractError("f() is not deterministic: two evaluations differ bitwise")

    zero_grads(params)
    with tape():
        out = f()
        if out._tape is not None:
            backward(out)
        # a constant f never attaches to the tape; its grads are all zero
    grads = {}
    for name, p in params.items():
        grads[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
    zero_grads(params)

    picker = np.random.default_rng(sample_seed)
    report = GradCheckReport(eps=eps, tol=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        if sample_per_param is None or flat.size <= sample_per_param:
            indices = range(flat.size)
        else:
            indices = np.sort(picker.choice(flat.size, size=sample_per_param, replace=False))
        worst = 0.0
        worst_i = -1
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            ad = gflat[i]
            err = abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)
            if err > worst:
                worst, worst_i = err, int(i)
        report.per_param[name] = worst
        if worst > report.max_rel_err:
            report.max_rel_err = worst
            report.worst_param = name
            report.worst_index = worst_i
    return report
