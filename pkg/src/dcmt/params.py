"""Parameter construction helpers shared by the model components."""

from __future__ import annotations

import numpy as np

from .rng import Rng
from .tensor import Tensor


def gaussian(rng: Rng, shape: tuple[int, ...], scale: float) -> Tensor:
    n = int(np.prod(shape))
    vals = np.array(rng.normals(n)).reshape(shape) * scale
    return Tensor(vals, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def full(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=True)


def scalar(value: float) -> Tensor:
    return Tensor(float(value), requires_grad=True)
