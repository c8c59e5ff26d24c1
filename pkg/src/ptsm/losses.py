"""Loss terms and their weighted combination.

All terms take batch-first tensors and return scalar tensors that can be
differentiated with :func:`ptsm.tensor.backward`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .config import LossWeights
from .errors import ContractError, NonFiniteLossError
from .tensor import Tensor

NORM_EPS = 1e-12
COV_EPS = 1e-8
PROB_FLOOR = 1e-12

TERMS = (
    "task",
    "subj",
    "sim",
    "sparse_mask",
    "size",
    "orth",
    "cov",
    "info",
    "sparse_feat",
    "contrast_task",
    "contrast_subj",
)


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ContractError(f"{y.shape[0]} labels for a batch of {n}")
    return y


def cross_entropy(probs, labels, return_info: bool = False):
    """Mean negative log-probability of the true class.

    True-class probabilities are floored at 1e-12; with ``return_info`` the
    number of floored entries is returned alongside the loss.
    """
    probs = T.as_tensor(probs)
    y = _labels(labels, probs.shape[0])
    if y.min() < 0 or y.max() >= probs.shape[1]:
        raise ContractError(f"labels out of range for {probs.shape[1]} classes")
    p_true = probs[np.arange(len(y)), y]
    n_clamped = int((p_true.data <= PROB_FLOOR).sum())
    loss = -T.mean(T.log(T.clip_min(p_true, PROB_FLOOR)))
    return (loss, n_clamped) if return_info else loss


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    dot = T.tsum(a * b, axis=1)
    return dot / T.clip_min(T.l2_norm(a, axis=1) * T.l2_norm(b, axis=1), NORM_EPS)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.ndim == 1:
        a, b = T.reshape(a, (1, -1)), T.reshape(b, (1, -1))
    if a.shape != b.shape or a.ndim != 2:
        raise ContractError(f"expected two (N, D) tensors of equal shape, got {a.shape}, {b.shape}")
    return a, b


def mask_similarity(m_p, m_c, absolute: bool = False) -> Tensor:
    """Mean cosine similarity between flattened personal and common masks.

    Signed by default; a zero-norm mask contributes 0.
    """
    m_p, m_c = _pair(m_p, m_c)
    cos = _cosine(m_p, m_c)
    return T.mean(T.tabs(cos) if absolute else cos)


def mask_sparsity(m_p, m_c) -> Tensor:
    m_p, m_c = _pair(m_p, m_c)
    return T.mean(T.l1_norm(m_p, axis=1) + T.l1_norm(m_c, axis=1))


def mask_size(m_p, m_c, alpha_size: float) -> Tensor:
    """Mean absolute gap between each mask's average activation and ``alpha_size``."""
    m_p, m_c = _pair(m_p, m_c)
    gap_p = T.tabs(T.mean(m_p, axis=1) - alpha_size)
    gap_c = T.tabs(T.mean(m_c, axis=1) - alpha_size)
    return T.mean(gap_p + gap_c)


def orthogonality(f_task, f_subj) -> Tensor:
    f_task, f_subj = _pair(f_task, f_subj)
    return T.mean(T.tabs(_cosine(f_task, f_subj)))


def covariance_decorrelation(f_task, f_subj) -> Tensor:
    """Frobenius norm of the cross-covariance over the product of the auto-covariance norms."""
    f_task, f_subj = _pair(f_task, f_subj)
    cross = T.frobenius_norm(T.batch_cov(f_task, f_subj))
    auto = T.frobenius_norm(T.batch_cov(f_task)) * T.frobenius_norm(T.batch_cov(f_subj))
    return cross / (auto + COV_EPS)


def _capped(tr: Tensor, cap: float | None) -> Tensor:
    # min(tr, cap) == -max(-tr, -cap)
    return tr if cap is None else -T.clip_min(-tr, -cap)


def info_retention(f_task, f_subj, trace_clamp: float | None = None) -> Tensor:
    """Negative summed covariance traces. ``trace_clamp`` caps each trace."""
    f_task, f_subj = _pair(f_task, f_subj)
    tr_t = _capped(T.trace(T.batch_cov(f_task)), trace_clamp)
    tr_s = _capped(T.trace(T.batch_cov(f_subj)), trace_clamp)
    return -(tr_t + tr_s)


def feature_sparsity(f_task, f_subj) -> Tensor:
    """L1 of both embeddings, summed (not averaged) over the batch."""
    f_task, f_subj = _pair(f_task, f_subj)
    return T.tsum(T.l1_norm(f_task, axis=1) + T.l1_norm(f_subj, axis=1))


def nt_xent(embeddings, labels, tau: float = 0.5) -> tuple[Tensor, bool]:
    """Supervised NT-Xent with label-defined positives.

    For every anchor that has at least one other sample with its label::

        -log( sum_pos exp(cos(a, p) / tau) / sum_{k != a} exp(cos(a, k) / tau) )

    averaged over those anchors. Returns ``(loss, degenerate)``; a batch in
    which no anchor has a positive yields ``(0, True)``.
    """
    z = T.as_tensor(embeddings)
    n = z.shape[0]
    if z.ndim != 2 or n < 2:
        raise ContractError("nt_xent needs a (N, d) batch with N >= 2")
    if not tau > 0:
        raise ContractError("temperature must be positive")
    y = _labels(labels, n)
    others = 1.0 - np.eye(n)
    pos = (y[:, None] == y[None, :]) * others
    anchors = np.flatnonzero(pos.sum(axis=1) > 0)
    if anchors.size == 0:
        return Tensor(0.0), True
    unit = z / T.reshape(T.clip_min(T.l2_norm(z, axis=1), NORM_EPS), (n, 1))
    # shift by the largest attainable logit; cancels in the ratio
    sim = (unit @ T.transpose(unit)) * (1.0 / tau) - 1.0 / tau
    e = T.exp(sim)
    denom = T.tsum(e * others, axis=1)
    numer = T.tsum(e * pos, axis=1)
    per_anchor = T.log(denom[anchors]) - T.log(numer[anchors])
    return T.mean(per_anchor), False


@dataclass
class LossReport:
    task: float = 0.0
    subj: float = 0.0
    sim: float = 0.0
    sparse_mask: float = 0.0
    size: float = 0.0
    orth: float = 0.0
    cov: float = 0.0
    info: float = 0.0
    sparse_feat: float = 0.0
    contrast_task: float = 0.0
    contrast_subj: float = 0.0
    decouple: float = 0.0
    mask: float = 0.0
    contrast: float = 0.0
    total: float = 0.0
    ce_clamped: int = 0
    contrast_degenerate: int = 0
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "tensor"}

    @staticmethod
    def columns() -> list[str]:
        return [f.name for f in dataclasses.fields(LossReport) if f.name != "tensor"]

    @classmethod
    def average(cls, reports: list["LossReport"]) -> "LossReport":
        if not reports:
            return cls()
        rows = [r.as_row() for r in reports]
        avg = {k: float(np.mean([row[k] for row in rows])) for k in rows[0]}
        avg["ce_clamped"] = int(sum(r.ce_clamped for r in reports))
        avg["contrast_degenerate"] = int(sum(r.contrast_degenerate for r in reports))
        return cls(**avg)


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(
    components: Mapping[str, Tensor | float], weights: LossWeights, **flags: int
) -> LossReport:
    """Weighted composition of the named terms.

    ``decouple = orth*l_orth + cov*l_cov + info*l_info + sparse_feat*l_sparse_feat``,
    ``mask = sim*l_sim + sparse_mask*l_sparse_mask + size*l_size``,
    ``contrast = contrast_task*l_ct + contrast_subj*l_cs`` and
    ``total = task + l_subj*subj + l_decouple*decouple + l_mask*mask + l_contrast*contrast``.
    Missing components count as 0. ``report.tensor`` carries the differentiable total.
    """
    unknown = set(components) - set(TERMS)
    if unknown:
        raise ContractError(f"unknown loss terms: {sorted(unknown)}")
    c = {k: components.get(k, 0.0) for k in TERMS}
    for k, v in c.items():
        val = _value(v)
        if not math.isfinite(val):
            raise NonFiniteLossError(k, val)
    w = weights
    decouple = (
        w.lambda_orth * c["orth"]
        + w.lambda_cov * c["cov"]
        + w.lambda_info * c["info"]
        + w.lambda_sparse_feat * c["sparse_feat"]
    )
    mask = w.lambda_sim * c["sim"] + w.lambda_sparse_mask * c["sparse_mask"] + w.lambda_size * c["size"]
    contrast = w.lambda_contrast_task * c["contrast_task"] + w.lambda_contrast_subj * c["contrast_subj"]
    total = (
        c["task"]
        + w.lambda_subj * c["subj"]
        + w.lambda_decouple * decouple
        + w.lambda_mask * mask
        + w.lambda_contrast * contrast
    )
    report = LossReport(
        **{k: _value(v) for k, v in c.items()},
        decouple=_value(decouple),
        mask=_value(mask),
        contrast=_value(contrast),
        total=_value(total),
        ce_clamped=int(flags.get("ce_clamped", 0)),
        contrast_degenerate=int(flags.get("contrast_degenerate", 0)),
    )
    if not math.isfinite(report.total):
        raise NonFiniteLossError("total", report.total)
    report.tensor = total if isinstance(total, Tensor) else Tensor(total)
    return report
