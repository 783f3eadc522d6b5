"""Cross-modal contrastive alignment.

Cosine similarity between pooled embeddings, a symmetric InfoNCE loss
with a learnable log-parameterized temperature, and the InfoNCE
mutual-information lower bound ln N - loss.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .params import scalar
from .tensor import Tensor

TAU_MIN = 1e-3
TAU_MAX = 10.0


def similarity_matrix(v: Tensor, t: Tensor) -> Tensor:
    """S[i, j] = cosine(V_i, t_j). Rows are L2-normalized here; a zero-norm
    row cannot be normalized and is rejected."""
    if v.ndim != 2 or t.ndim != 2 or v.shape != t.shape:
        raise DimensionError(f"need matching N×d inputs, got {v.shape} and {t.shape}")
    if v.shape[0] < 2:
        raise ContractError(f"contrastive batch needs N >= 2, got N={v.shape[0]}")
    for name, x in (("V", v), ("t", t)):
        norms = np.sqrt((x.data * x.data).sum(axis=1))
        if np.any(norms < 1e-12):
            raise ContractError(f"zero-norm row in {name} cannot be cosine-normalized")
    vn = v / T.sqrt(T.sum_(v * v, axis=1, keepdims=True))
    tn = t / T.sqrt(T.sum_(t * t, axis=1, keepdims=True))
    return T.matmul(vn, T.transpose(tn))


def info_nce(s: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE: mean cross-entropy of the diagonal under
    row-softmax and column-softmax of S/tau, averaged."""
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {s.shape}")
    n = s.shape[0]
    if n < 2:
        raise ContractError(f"contrastive loss needs N >= 2, got N={n}")
    tau_t = tau if isinstance(tau, Tensor) else Tensor(float(tau))
    if tau_t.item() <= 0:
        raise ContractError(f"temperature must be positive, got {tau_t.item()}")
    logits = s / tau_t
    eye = Tensor(np.eye(n))
    row_loss = -T.sum_(T.log_softmax(logits, axis=1) * eye) / n
    col_loss = -T.sum_(T.log_softmax(logits, axis=0) * eye) / n
    return (row_loss + col_loss) * 0.5


def mi_lower_bound(s: Tensor, tau) -> float:
    """ln N - InfoNCE, clamped below at 0 for reporting. In [0, ln N]."""
    n = s.shape[0]
    return max(0.0, math.log(n) - info_nce(s, tau).item())


class AlignmentHead:
    """Holds the learnable temperature. tau = exp(log_tau), clamped into
    [1e-3, 10] after each optimizer step via clamp()."""

    def __init__(self, tau_init: float = 0.07):
        if not (TAU_MIN <= tau_init <= TAU_MAX):
            raise ContractError(f"tau_init {tau_init} outside [{TAU_MIN}, {TAU_MAX}]")
        self.log_tau = scalar(math.log(tau_init))

    @property
    def tau(self) -> Tensor:
        return T.exp(self.log_tau)

    def clamp(self):
        self.log_tau.data = np.clip(self.log_tau.data, math.log(TAU_MIN), math.log(TAU_MAX))

    def named_parameters(self, prefix: str = "align") -> dict[str, Tensor]:
        return {f"{prefix}.log_tau": self.log_tau}
