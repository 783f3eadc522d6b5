"""Hierarchical encoder with top-down refinement.

Levels are transformer blocks; between levels, states are segmented and
pooled into fewer tokens. The cross-level equation
h^l = block_l(bottom_up_input^l + TopDown(h^{l+1})) is circular, so it is
unrolled into R coordinate rounds: round 1 is pure bottom-up, and every
later round runs a top-down refinement sweep followed by a bottom-up
re-pass that re-segments from the refined states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import tensor as T
from .errors import ContractError, DimensionError
from .params import gaussian, ones, zeros
from .rng import Rng
from .segmentation import SoftSegmentation, TokenSequence, pool_segments, soft_segment

# tape hook for the hand-differentiated sublayers below
from .tensor import Tensor, _record

ATTN_MASK_BIAS = -1e9


@dataclass
class LevelState:
    level: int
    h: Tensor  # (K_l, d), refined state after the final round
    link: SoftSegmentation | None  # connects level l-1 positions to level-l slots; None at level 0
    occupancy: Tensor | None  # (K_l,); None at level 0
    mask: np.ndarray | None  # bool validity per slot; None at level 0 (all valid)
    block_input: Tensor  # what the block consumed on the final pass


# ------------------------------------------------ hand-differentiated kernels
# The encoder spends nearly all of its time inside its two residual
# sublayers, and per-tape-node overhead was the measured bottleneck, so each
# sublayer runs as a single tape node with a hand-derived pullback. These are
# deliberately private: the numerics library stays a vocabulary of small
# composable ops, and the fusion is an implementation detail of this encoder.


def _ln2d(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    inv_d = 1.0 / x.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) * inv_d
    xc = x - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def _ln2d_back(dy: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    inv_d = 1.0 / xhat.shape[-1]
    dxhat = dy * gain
    m1 = dxhat.sum(axis=-1, keepdims=True) * inv_d
    m2 = (dxhat * xhat).sum(axis=-1, keepdims=True) * inv_d
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def _attn_sublayer(h, ln_g, ln_b, wq, bq, wk, bk, wv, bv, wo, bo,
                   n_heads: int, mask: np.ndarray | None, eps: float = 1e-5) -> Tensor:
    """Pre-norm multi-head self-attention with residual:
    h + proj(multihead(layer_norm(h))), masked rows passing through
    untouched. Heads run batched on a (H, L, d/H) layout."""
    ts = (h, ln_g, ln_b, wq, bq, wk, bk, wv, bv, wo, bo)
    L, d = h.shape
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    hd, gd, bd_, wqd, bqd, wkd, bkd, wvd, bvd, wod, bod = (t.data for t in ts)

    x1, xhat, inv = _ln2d(hd, gd, bd_, eps)
    q = x1 @ wqd + bqd
    k = x1 @ wkd + bkd
    v = x1 @ wvd + bvd
    # (L, d) -> (H, L, dh)
    q3 = q.reshape(L, n_heads, dh).transpose(1, 0, 2)
    k3 = k.reshape(L, n_heads, dh).transpose(1, 0, 2)
    v3 = v.reshape(L, n_heads, dh).transpose(1, 0, 2)
    scores = q3 @ k3.transpose(0, 2, 1) * scale
    if mask is not None:
        scores = scores + np.where(mask, 0.0, ATTN_MASK_BIAS)[None, None, :]
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    merged = (p @ v3).transpose(1, 0, 2).reshape(L, d)
    attn = merged @ wod + bod
    mf = None if mask is None else mask.astype(float)[:, None]
    if mf is not None:
        attn = attn * mf
    out = hd + attn

    def pull(g):
        da = g if mf is None else g * mf
        dbo = da.sum(axis=0)
        dwo = merged.T @ da
        dm3 = (da @ wod.T).reshape(L, n_heads, dh).transpose(1, 0, 2)
        dp = dm3 @ v3.transpose(0, 2, 1)
        dv3 = p.transpose(0, 2, 1) @ dm3
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = (ds @ k3 * scale).transpose(1, 0, 2).reshape(L, d)
        dk = (ds.transpose(0, 2, 1) @ q3 * scale).transpose(1, 0, 2).reshape(L, d)
        dv = dv3.transpose(1, 0, 2).reshape(L, d)
        dx1 = dq @ wqd.T + dk @ wkd.T + dv @ wvd.T
        dh_ln, dgain, dbias = _ln2d_back(dx1, xhat, inv, gd)
        return (g + dh_ln, dgain, dbias,
                x1.T @ dq, dq.sum(axis=0),
                x1.T @ dk, dk.sum(axis=0),
                x1.T @ dv, dv.sum(axis=0),
                dwo, dbo)

    return _record(out, ts, pull, "attn_sublayer")


def _mlp_sublayer(h, ln_g, ln_b, w_up, b_up, w_down, b_down,
                  mask: np.ndarray | None, eps: float = 1e-5) -> Tensor:
    """Pre-norm GELU MLP with residual: h + down(gelu(up(layer_norm(h)))),
    masked rows passing through untouched."""
    ts = (h, ln_g, ln_b, w_up, b_up, w_down, b_down)
    hd, gd, bd_, wud, bud, wdd, bdd = (t.data for t in ts)

    x2, xhat, inv = _ln2d(hd, gd, bd_, eps)
    u = x2 @ wud + bud
    phi_cdf = 0.5 * (1.0 + special.erf(u / math.sqrt(2.0)))
    act = u * phi_cdf
    m = act @ wdd + bdd
    mf = None if mask is None else mask.astype(float)[:, None]
    if mf is not None:
        m = m * mf
    out = hd + m

    def pull(g):
        dm = g if mf is None else g * mf
        dbd = dm.sum(axis=0)
        dwd = act.T @ dm
        dact = dm @ wdd.T
        pdf = np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
        du = dact * (phi_cdf + u * pdf)
        dx2 = du @ wud.T
        dh_ln, dgain, dbias = _ln2d_back(dx2, xhat, inv, gd)
        return (g + dh_ln, dgain, dbias,
                x2.T @ du, du.sum(axis=0),
                dwd, dbd)

    return _record(out, ts, pull, "mlp_sublayer")


class TransformerBlock:
    """Pre-norm self-attention + MLP with residuals. Masked positions
    neither attend nor get attended to; their residual stream passes
    through unchanged."""

    def __init__(self, d: int, n_heads: int, rng: Rng | None = None):
        if d < 1 or n_heads < 1 or d % n_heads != 0:
            raise ContractError(f"head count {n_heads} must divide width {d}")
        rng = rng if rng is not None else Rng(0)
        self.d = d
        self.n_heads = n_heads
        scale = 1.0 / math.sqrt(d)
        self.ln1_g, self.ln1_b = ones(d), zeros(d)
        self.wq, self.bq = gaussian(rng, (d, d), scale), zeros(d)
        self.wk, self.bk = gaussian(rng, (d, d), scale), zeros(d)
        self.wv, self.bv = gaussian(rng, (d, d), scale), zeros(d)
        self.wo, self.bo = gaussian(rng, (d, d), scale), zeros(d)
        self.ln2_g, self.ln2_b = ones(d), zeros(d)
        self.w_up, self.b_up = gaussian(rng, (d, 4 * d), scale), zeros(4 * d)
        self.w_down, self.b_down = gaussian(rng, (4 * d, d), 1.0 / math.sqrt(4 * d)), zeros(d)

    def named_parameters(self, prefix: str = "block") -> dict[str, Tensor]:
        return {
            f"{prefix}.ln1_g": self.ln1_g,
            f"{prefix}.ln1_b": self.ln1_b,
            f"{prefix}.wq": self.wq,
            f"{prefix}.bq": self.bq,
            f"{prefix}.wk": self.wk,
            f"{prefix}.bk": self.bk,
            f"{prefix}.wv": self.wv,
            f"{prefix}.bv": self.bv,
            f"{prefix}.wo": self.wo,
            f"{prefix}.bo": self.bo,
            f"{prefix}.ln2_g": self.ln2_g,
            f"{prefix}.ln2_b": self.ln2_b,
            f"{prefix}.w_up": self.w_up,
            f"{prefix}.b_up": self.b_up,
            f"{prefix}.w_down": self.w_down,
            f"{prefix}.b_down": self.b_down,
        }

    def __call__(self, h: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if h.ndim != 2 or h.shape[1] != self.d:
            raise DimensionError(f"block expects K×{self.d}, got {h.shape}")
        if h.shape[0] < 1:
            raise ContractError("block needs at least one position")
        if mask is not None and not mask.any():
            raise ContractError("all positions masked")
        if mask is not None and mask.all():
            mask = None

        h = _attn_sublayer(
            h, self.ln1_g, self.ln1_b,
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
            self.n_heads, mask,
        )
        return _mlp_sublayer(
            h, self.ln2_g, self.ln2_b,
            self.w_up, self.b_up, self.w_down, self.b_down,
            mask,
        )


def top_down(h_upper: Tensor, link: SoftSegmentation, proj: Tensor) -> Tensor:
    """Send each lower position its soft parent's projected state:
    TD_t = (sum_k A[t,k] h_upper_k) proj."""
    a = link.assignment
    if a.shape[1] != h_upper.shape[0]:
        raise DimensionError(
            f"assignment covers {a.shape[1]} upper slots but h_upper has {h_upper.shape[0]} rows"
        )
    if proj.ndim != 2 or proj.shape[0] != h_upper.shape[1]:
        raise DimensionError(f"projection {proj.shape} does not match state width {h_upper.shape[1]}")
    return T.matmul(T.matmul(a, h_upper), proj)


def default_k_max(count: int) -> int:
    """Slot budget for segmenting a level with `count` positions. Capped at
    `count` so token counts can never grow going up."""
    return min(math.ceil(count / 2) + 2, count)


def encode_hierarchy(
    x0: Tensor,
    segmenters: list,
    blocks: list[TransformerBlock],
    td_projs: list[Tensor] | None,
    rounds: int,
    k_max_for=default_k_max,
    trace: list | None = None,
) -> list[LevelState]:
    """Run the unrolled multi-round encoder.

    segmenters[l-1] produces boundary probabilities over level l-1 states
    (anything with .probs(embeddings, valid) -> Tensor). td_projs[l] maps
    level l+1 states into level l and may be None when rounds == 1.
    When `trace` is given, each refinement appends
    (level, bottom_up_input, td, block_input) data arrays.
    """
    n_levels = len(blocks)
    if n_levels < 2:
        raise ContractError(f"hierarchy needs at least 2 levels, got {n_levels}")
    if rounds < 1:
        raise ContractError(f"rounds must be >= 1, got {rounds}")
    if len(segmenters) != n_levels - 1:
        raise ContractError(f"{n_levels} levels need {n_levels - 1} segmenters")
    if rounds > 1 and (td_projs is None or len(td_projs) != n_levels - 1):
        raise ContractError("refinement rounds need one top-down projection per lower level")

    inputs: list[Tensor] = [x0]
    masks: list[np.ndarray | None] = [None]
    links: list[SoftSegmentation | None] = [None]
    occs: list[Tensor | None] = [None]
    h: list[Tensor] = [blocks[0](x0, None)]
    for l in range(1, n_levels):
        seg, toks = _segment_and_pool(h[l - 1], masks[l - 1], segmenters[l - 1], k_max_for)
        inputs.append(toks.tokens)
        masks.append(toks.mask)
        links.append(seg)
        occs.append(toks.occupancy)
        h.append(blocks[l](toks.tokens, toks.mask))

    for _ in range(rounds - 1):
        for l in range(n_levels - 2, -1, -1):
            td = top_down(h[l + 1], links[l + 1], td_projs[l])
            block_in = inputs[l] + td
            if trace is not None:
                trace.append((l, inputs[l].data.copy(), td.data.copy(), block_in.data.copy()))
            h[l] = blocks[l](block_in, masks[l])
        for l in range(1, n_levels):
            seg, toks = _segment_and_pool(h[l - 1], masks[l - 1], segmenters[l - 1], k_max_for)
            inputs[l] = toks.tokens
            masks[l] = toks.mask
            links[l] = seg
            occs[l] = toks.occupancy
            h[l] = blocks[l](toks.tokens, toks.mask)

    return [
        LevelState(
            level=l,
            h=h[l],
            link=links[l],
            occupancy=occs[l],
            mask=masks[l],
            block_input=inputs[l],
        )
        for l in range(n_levels)
    ]


def _segment_and_pool(state: Tensor, mask: np.ndarray | None, segmenter, k_max_for):
    b = segmenter.probs(state, mask)
    seg = soft_segment(b, k_max_for(state.shape[0]), valid=mask)
    toks = pool_segments(state, seg)
    return seg, toks


def assignment_chain(states: list[LevelState]) -> np.ndarray:
    """Attribution of the top level's occupancy-weighted pool over level-0
    positions: chain the assignment matrices down and renormalize.
    Returns a length-K_0 nonnegative vector summing to 1."""
    occ = states[-1].occupancy.data
    weights = occ / max(occ.sum(), 1e-12)
    for state in reversed(states[1:]):
        weights = state.link.assignment.data @ weights
    total = weights.sum()
    if total <= 0:
        raise ContractError("degenerate attribution: no mass reached level 0")
    return weights / total
