"""The assembled PTSM network: masks -> encoders -> heads -> classifiers."""

from __future__ import annotations

import dataclasses
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import stap, tsfd
from .config import LossWeights, PtsmConfig
from .errors import ContractError
from .stap import MaskSet
from .tensor import Tensor
from .tsfd import LatentBundle


@dataclass(frozen=True)
class Wiring:
    """Effective forward/loss wiring after applying the ablation flags."""

    use_masks: bool
    alpha: float | None
    beta: float | None
    weights: LossWeights
    fusion_trainable: bool


def apply_ablation(cfg: PtsmConfig) -> Wiring:
    ab = cfg.ablation
    w = cfg.weights
    if not ab.disable_stap and ab.disable_personal_branch and ab.disable_common_branch:
        raise ContractError("cannot disable both the personal and the common mask branch")
    changes: dict[str, float] = {}
    alpha = beta = None
    use_masks = True
    if ab.disable_stap:
        use_masks = False
        changes["lambda_mask"] = 0.0
    elif ab.disable_personal_branch:
        alpha = beta = 0.0
        changes["lambda_sim"] = 0.0
    elif ab.disable_common_branch:
        alpha = beta = 1.0
        changes["lambda_sim"] = 0.0
    for flag, lam in (
        ("disable_orth", "lambda_orth"),
        ("disable_cov", "lambda_cov"),
        ("disable_info", "lambda_info"),
        ("disable_sparse_feat", "lambda_sparse_feat"),
    ):
        if getattr(ab, flag):
            changes[lam] = 0.0
    return Wiring(
        use_masks=use_masks,
        alpha=alpha,
        beta=beta,
        weights=dataclasses.replace(w, **changes),
        fusion_trainable=cfg.fusion_learnable and use_masks and alpha is None,
    )


def init_state_arrays(cfg: PtsmConfig, rng: np.random.Generator) -> tuple[dict, dict]:
    """Fresh parameters and batch-norm buffers for ``cfg``."""
    params = stap.init_generator_params(
        cfg.n_channels, rng, cfg.spatial_hidden, cfg.temporal_hidden, cfg.temporal_kernel
    )
    params.update(
        tsfd.init_params(
            cfg.n_channels, cfg.n_classes, cfg.n_subjects, cfg.pooled_len, cfg.feature_dim, rng
        )
    )
    return params, tsfd.init_buffers(cfg.feature_dim)


class TensorView(Mapping):
    """Read-only view wrapping stored arrays as constant tensors on access."""

    def __init__(self, arrays: Mapping[str, np.ndarray | Tensor]):
        self._arrays = arrays

    def __getitem__(self, key: str) -> Tensor:
        v = self._arrays[key]
        return v if isinstance(v, Tensor) else Tensor(v)

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)


@dataclass
class ForwardResult:
    masks: MaskSet
    x_masked: Tensor
    latents: LatentBundle
    p_task: Tensor
    p_subj: Tensor | None
    buffer_updates: dict[str, np.ndarray]


def forward(
    params: Mapping,
    buffers: Mapping[str, np.ndarray],
    x: np.ndarray,
    cfg: PtsmConfig,
    wiring: Wiring | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    with_subject: bool = True,
) -> ForwardResult:
    """One pass over a batch ``x`` of shape ``(N, C, T)``.

    With ``with_subject=False`` the subject head and classifier are never
    read, which is how :func:`predict` runs.
    """
    wiring = wiring or apply_ablation(cfg)
    params = TensorView(params)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.n_channels, cfg.n_times):
        raise ContractError(
            f"input shape {x.shape} does not match config (N, {cfg.n_channels}, {cfg.n_times})"
        )
    if wiring.use_masks:
        fusion = stap.fusion_weights(params, cfg.fusion_learnable, wiring.alpha, wiring.beta)
        masks = stap.generate_masks(x, params, fusion)
    else:
        masks = stap.ones_masks(x.shape[0], cfg.n_channels, cfg.n_times)
    x_masked = stap.apply_masks(x, masks)

    updates: dict[str, np.ndarray] = {}
    h_temp = tsfd.encode_temporal(
        x_masked, params, buffers, cfg.pooled_len, training, rng, cfg.dropout, updates
    )
    h_shared = tsfd.encode_shared(h_temp, params, training, rng, cfg.dropout)
    f_task = tsfd.project_head(h_shared, params, buffers, "task", training, updates)
    p_task = tsfd.classify(f_task, params, "task", training, rng, cfg.dropout)
    f_subj = p_subj = None
    if with_subject:
        f_subj = tsfd.project_head(h_shared, params, buffers, "subj", training, updates)
        p_subj = tsfd.classify(f_subj, params, "subj", training, rng, cfg.dropout)
    return ForwardResult(
        masks=masks,
        x_masked=x_masked,
        latents=LatentBundle(h_temp, h_shared, f_task, f_subj),
        p_task=p_task,
        p_subj=p_subj,
        buffer_updates=updates,
    )


def predict_proba(params, buffers, x, cfg: PtsmConfig, batch_size: int = 256) -> np.ndarray:
    """Task probabilities in evaluation mode, evaluated in chunks."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    out = [
        forward(params, buffers, x[i : i + batch_size], cfg, with_subject=False).p_task.data
        for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.n_classes))


def predict(params, buffers, x, cfg: PtsmConfig) -> np.ndarray:
    """Predicted task labels; ties resolve to the lowest class index."""
    return tsfd.argmax_labels(predict_proba(params, buffers, x, cfg))
