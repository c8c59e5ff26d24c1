"""Dual-branch spatio-temporal masking.

Two branches (personalized ``p`` and common ``c``) each produce a spatial mask
over channels and a temporal mask over samples. Both are sigmoid gates driven
by the trial itself:

* spatial generator: per-channel mean and standard deviation over time
  (``2C`` features) -> dense(64) -> ELU -> dense(C)
* temporal generator: channel-mean signal -> conv1d(16, k=7) -> ELU ->
  conv1d(1, k=7)

The branches are fused convexly, ``m = w * personal + (1 - w) * common``, with
``beta`` weighting the spatial masks and ``alpha`` the temporal ones.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import conv_weight, dense_weight
from .tensor import Tensor

BRANCHES = ("p", "c")


@dataclass
class MaskSet:
    """Branch and fused masks for a batch: spatial ``(N, C)``, temporal ``(N, T)``."""

    m_s_p: Tensor
    m_t_p: Tensor
    m_s_c: Tensor
    m_t_c: Tensor
    m_s: Tensor
    m_t: Tensor

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name).data for f in fields(self)}


@dataclass
class FusionWeights:
    alpha: Tensor | float
    beta: Tensor | float
    learnable: bool = True

    def values(self) -> tuple[float, float]:
        a = self.alpha.item() if isinstance(self.alpha, Tensor) else float(self.alpha)
        b = self.beta.item() if isinstance(self.beta, Tensor) else float(self.beta)
        return a, b


def init_generator_params(
    n_channels: int, rng: np.random.Generator, hidden: int = 64, conv_hidden: int = 16, kernel: int = 7
) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases, fusion logits at 0 (alpha = beta = 0.5)."""
    params: dict[str, np.ndarray] = {}
    for br in BRANCHES:
        params[f"stap.spatial_{br}.fc1.w"] = dense_weight(2 * n_channels, hidden, rng)
        params[f"stap.spatial_{br}.fc1.b"] = np.zeros(hidden)
        params[f"stap.spatial_{br}.fc2.w"] = dense_weight(hidden, n_channels, rng)
        params[f"stap.spatial_{br}.fc2.b"] = np.zeros(n_channels)
        params[f"stap.temporal_{br}.conv1.w"] = conv_weight(conv_hidden, 1, kernel, rng)
        params[f"stap.temporal_{br}.conv1.b"] = np.zeros(conv_hidden)
        params[f"stap.temporal_{br}.conv2.w"] = conv_weight(1, conv_hidden, kernel, rng)
        params[f"stap.temporal_{br}.conv2.b"] = np.zeros(1)
    params["stap.fusion.alpha_logit"] = np.zeros(1)
    params["stap.fusion.beta_logit"] = np.zeros(1)
    return params


def personal_param_names(names) -> list[str]:
    """The parameters of the personalized generators (spatial and temporal)."""
    return [n for n in names if n.startswith(("stap.spatial_p.", "stap.temporal_p."))]


def channel_summary(x: np.ndarray) -> np.ndarray:
    """Per-channel mean and standard deviation over time, ``(N, 2C)``."""
    return np.concatenate([x.mean(axis=2), x.std(axis=2)], axis=1)


def spatial_logits(x: np.ndarray, params: Mapping[str, Tensor], branch: str) -> Tensor:
    pre = f"stap.spatial_{branch}"
    w1 = params[f"{pre}.fc1.w"]
    if w1.shape[0] != 2 * x.shape[1]:
        raise ContractError(
            f"spatial generator expects {w1.shape[0] // 2} channels, input has {x.shape[1]}"
        )
    h = T.elu(Tensor(channel_summary(x)) @ w1 + params[f"{pre}.fc1.b"])
    return h @ params[f"{pre}.fc2.w"] + params[f"{pre}.fc2.b"]


def temporal_logits(x: np.ndarray, params: Mapping[str, Tensor], branch: str) -> Tensor:
    pre = f"stap.temporal_{branch}"
    w1 = params[f"{pre}.conv1.w"]
    pad = w1.shape[2] // 2
    s = Tensor(x.mean(axis=1, keepdims=True))
    h = T.elu(T.conv1d(s, w1, params[f"{pre}.conv1.b"], padding=pad))
    out = T.conv1d(h, params[f"{pre}.conv2.w"], params[f"{pre}.conv2.b"], padding=pad)
    return T.reshape(out, (x.shape[0], x.shape[2]))


def fusion_weights(
    params: Mapping[str, Tensor],
    learnable: bool = True,
    alpha: float | None = None,
    beta: float | None = None,
) -> FusionWeights:
    """Fusion scalars: fixed when given, else the sigmoid of the stored logits."""
    a = alpha if alpha is not None else T.sigmoid(params["stap.fusion.alpha_logit"])
    b = beta if beta is not None else T.sigmoid(params["stap.fusion.beta_logit"])
    return FusionWeights(a, b, learnable=learnable and alpha is None and beta is None)


def _fuse(w, personal: Tensor, common: Tensor) -> Tensor:
    return w * personal + (1.0 - w) * common


def generate_masks(x, params: Mapping[str, Tensor], fusion: FusionWeights) -> MaskSet:
    """Branch masks for every trial in ``x`` and their convex fusion.

    ``x`` is ``(N, C, T)`` or a single ``(C, T)`` trial (treated as ``N = 1``).
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ContractError(f"expected (N, C, T) input, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ContractError("input contains non-finite values")
    m = {}
    for br in BRANCHES:
        m[f"m_s_{br}"] = T.sigmoid(spatial_logits(x, params, br))
        m[f"m_t_{br}"] = T.sigmoid(temporal_logits(x, params, br))
    m_s = _fuse(fusion.beta, m["m_s_p"], m["m_s_c"])
    m_t = _fuse(fusion.alpha, m["m_t_p"], m["m_t_c"])
    return MaskSet(m_s=m_s, m_t=m_t, **m)


def ones_masks(n: int, n_channels: int, n_times: int) -> MaskSet:
    one_s, one_t = Tensor(np.ones((n, n_channels))), Tensor(np.ones((n, n_times)))
    return MaskSet(one_s, one_t, one_s, one_t, one_s, one_t)


def apply_masks(x, masks: MaskSet | tuple) -> Tensor:
    """``x[c, t] * m_s[c] * m_t[t]`` per trial; accepts batched or single inputs."""
    m_s, m_t = (masks.m_s, masks.m_t) if isinstance(masks, MaskSet) else masks
    x, m_s, m_t = T.as_tensor(x), T.as_tensor(m_s), T.as_tensor(m_t)
    if x.ndim == 2:
        if m_s.shape != (x.shape[0],) or m_t.shape != (x.shape[1],):
            raise ContractError(f"mask lengths {m_s.shape}, {m_t.shape} do not fit input {x.shape}")
        return x * T.reshape(m_s, (-1, 1)) * T.reshape(m_t, (1, -1))
    n, c, t = x.shape
    if m_s.shape != (n, c) or m_t.shape != (n, t):
        raise ContractError(f"mask shapes {m_s.shape}, {m_t.shape} do not fit input {x.shape}")
    return x * T.reshape(m_s, (n, c, 1)) * T.reshape(m_t, (n, 1, t))


def outer_flatten(m_t, m_s) -> Tensor:
    """Flattened outer product; entry ``c * T + t`` is ``m_s[c] * m_t[t]``.

    Single vectors give a length ``C*T`` result, batches ``(N, C*T)``.
    """
    m_t, m_s = T.as_tensor(m_t), T.as_tensor(m_s)
    if m_t.ndim != m_s.ndim or m_t.ndim not in (1, 2) or 0 in m_t.shape or 0 in m_s.shape:
        raise ContractError(f"incompatible mask shapes {m_t.shape}, {m_s.shape}")
    if m_t.ndim == 1:
        return T.reshape(T.reshape(m_s, (-1, 1)) * T.reshape(m_t, (1, -1)), (-1,))
    n = m_t.shape[0]
    if m_s.shape[0] != n:
        raise ContractError("batch sizes of the two masks differ")
    prod = T.reshape(m_s, (n, -1, 1)) * T.reshape(m_t, (n, 1, -1))
    return T.reshape(prod, (n, -1))
