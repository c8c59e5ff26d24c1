"""Encoders, the task/subject projection heads and the two classifiers.

Shapes for a batch of N trials with C channels and T samples::

    x_masked (N, C, T)
      -> 3 x [conv1d(k=5, pad=2) -> batch norm -> ELU -> dropout]  (32, 64, 128 filters)
      -> adaptive average pool            h_temp   (N, 128, T')
      -> dense 128*T' -> 256 -> 128, ELU  h_shared (N, 128)
      -> task / subject heads             f_task, f_subj (N, d_f)
      -> dense d_f -> 64 -> ReLU -> dropout -> dense -> softmax
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import batch_norm, conv_weight, dense, dense_weight
from .tensor import Tensor

ENCODER_FILTERS = (32, 64, 128)
ENCODER_KERNEL = 5
SHARED_HIDDEN = 256
SHARED_OUT = 128
CLASSIFIER_HIDDEN = 64
HEADS = ("task", "subj")


@dataclass
class LatentBundle:
    h_temp: Tensor
    h_shared: Tensor
    f_task: Tensor
    f_subj: Tensor | None


def init_params(
    n_channels: int,
    n_classes: int,
    n_subjects: int,
    pooled_len: int,
    feature_dim: int,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    c_in = n_channels
    for i, c_out in enumerate(ENCODER_FILTERS, start=1):
        p[f"encoder.conv{i}.w"] = conv_weight(c_out, c_in, ENCODER_KERNEL, rng)
        p[f"encoder.conv{i}.b"] = np.zeros(c_out)
        p[f"encoder.bn{i}.gamma"] = np.ones(c_out)
        p[f"encoder.bn{i}.beta"] = np.zeros(c_out)
        c_in = c_out
    p["shared.fc1.w"] = dense_weight(ENCODER_FILTERS[-1] * pooled_len, SHARED_HIDDEN, rng)
    p["shared.fc1.b"] = np.zeros(SHARED_HIDDEN)
    p["shared.fc2.w"] = dense_weight(SHARED_HIDDEN, SHARED_OUT, rng)
    p["shared.fc2.b"] = np.zeros(SHARED_OUT)
    for head, n_out in (("task", n_classes), ("subj", n_subjects)):
        p[f"{head}_head.fc.w"] = dense_weight(SHARED_OUT, feature_dim, rng)
        p[f"{head}_head.fc.b"] = np.zeros(feature_dim)
        p[f"{head}_head.bn.gamma"] = np.ones(feature_dim)
        p[f"{head}_head.bn.beta"] = np.zeros(feature_dim)
        p[f"{head}_clf.fc1.w"] = dense_weight(feature_dim, CLASSIFIER_HIDDEN, rng)
        p[f"{head}_clf.fc1.b"] = np.zeros(CLASSIFIER_HIDDEN)
        # zero output layer: both classifiers start at the uniform distribution
        p[f"{head}_clf.fc2.w"] = np.zeros((CLASSIFIER_HIDDEN, n_out))
        p[f"{head}_clf.fc2.b"] = np.zeros(n_out)
    return p


def init_buffers(feature_dim: int) -> dict[str, np.ndarray]:
    buf: dict[str, np.ndarray] = {}
    sizes = [(f"encoder.bn{i}", c) for i, c in enumerate(ENCODER_FILTERS, start=1)]
    sizes += [(f"{h}_head.bn", feature_dim) for h in HEADS]
    for prefix, n in sizes:
        buf[f"{prefix}.running_mean"] = np.zeros(n)
        buf[f"{prefix}.running_var"] = np.ones(n)
    return buf


def encode_temporal(
    x_masked,
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray],
    pooled_len: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.5,
    updates: dict[str, np.ndarray] | None = None,
) -> Tensor:
    """Temporal feature extractor; returns ``(N, 128, pooled_len)``."""
    h = T.as_tensor(x_masked)
    if h.ndim == 2:
        h = T.reshape(h, (1,) + h.shape)
    if h.shape[-1] < ENCODER_KERNEL:
        raise ContractError(f"need at least {ENCODER_KERNEL} samples, got {h.shape[-1]}")
    updates = {} if updates is None else updates
    for i in range(1, len(ENCODER_FILTERS) + 1):
        h = T.conv1d(h, params[f"encoder.conv{i}.w"], params[f"encoder.conv{i}.b"], padding=2)
        h = batch_norm(h, params, buffers, f"encoder.bn{i}", training, updates)
        h = T.dropout(T.elu(h), dropout, training, rng)
    return T.adaptive_avg_pool1d(h, pooled_len)


def encode_shared(
    h_temp: Tensor,
    params: Mapping[str, Tensor],
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.5,
) -> Tensor:
    n_in = params["shared.fc1.w"].shape[0]
    if h_temp.ndim != 3 or h_temp.shape[1] * h_temp.shape[2] != n_in:
        raise ContractError(f"shared encoder expects (N, 128, T') with 128*T' = {n_in}, got {h_temp.shape}")
    h = T.reshape(h_temp, (h_temp.shape[0], n_in))
    h = T.dropout(T.elu(dense(h, params, "shared.fc1")), dropout, training, rng)
    return T.elu(dense(h, params, "shared.fc2"))


def project_head(
    h_shared: Tensor,
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray],
    head: str,
    training: bool = False,
    updates: dict[str, np.ndarray] | None = None,
) -> Tensor:
    if h_shared.shape[-1] != params[f"{head}_head.fc.w"].shape[0]:
        raise ContractError(f"{head} head expects width {params[f'{head}_head.fc.w'].shape[0]}")
    if training and h_shared.shape[0] < 2:
        raise ContractError("training-mode projection heads need a batch of at least 2")
    z = dense(h_shared, params, f"{head}_head.fc")
    updates = {} if updates is None else updates
    return T.elu(batch_norm(z, params, buffers, f"{head}_head.bn", training, updates))


def project(
    h_shared: Tensor,
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray],
    training: bool = False,
    updates: dict[str, np.ndarray] | None = None,
) -> tuple[Tensor, Tensor]:
    """Task and subject embeddings from disjoint parameter sets."""
    return (
        project_head(h_shared, params, buffers, "task", training, updates),
        project_head(h_shared, params, buffers, "subj", training, updates),
    )


def classifier_logits(
    f: Tensor,
    params: Mapping[str, Tensor],
    head: str,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.5,
) -> Tensor:
    h = T.relu(dense(f, params, f"{head}_clf.fc1"))
    h = T.dropout(h, dropout, training, rng)
    return dense(h, params, f"{head}_clf.fc2")


def classify(
    f: Tensor,
    params: Mapping[str, Tensor],
    head: str = "task",
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.5,
) -> Tensor:
    """Class probabilities for the ``task`` or ``subj`` head."""
    if head not in HEADS:
        raise ContractError(f"unknown head {head!r}")
    return T.softmax(classifier_logits(f, params, head, training, rng, dropout), axis=-1)


def argmax_labels(probs) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    return np.argmax(p, axis=-1)
