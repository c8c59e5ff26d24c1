"""Parameter initialisation and small layer helpers built on :mod:`ptsm.tensor`."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def dense_weight(n_in: int, n_out: int, rng: np.random.Generator) -> np.ndarray:
    """(n_in, n_out) weight with unit-variance-preserving fan-in scaling."""
    return _uniform((n_in, n_out), n_in, rng)


def conv_weight(c_out: int, c_in: int, kernel: int, rng: np.random.Generator) -> np.ndarray:
    return _uniform((c_out, c_in, kernel), c_in * kernel, rng)


def dense(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return x @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


def batch_norm(
    x: Tensor,
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray],
    prefix: str,
    training: bool,
    updates: dict[str, np.ndarray],
) -> Tensor:
    """Batch norm reading ``prefix.gamma/beta`` and running stats from ``buffers``.

    New running statistics are written into ``updates`` rather than in place.
    """
    out, mean, var = T.batch_norm(
        x,
        params[f"{prefix}.gamma"],
        params[f"{prefix}.beta"],
        buffers[f"{prefix}.running_mean"],
        buffers[f"{prefix}.running_var"],
        training,
    )
    if training:
        updates[f"{prefix}.running_mean"] = mean
        updates[f"{prefix}.running_var"] = var
    return out
