"""Run configuration: architecture sizes, loss weights, ablation flags, optimizer.

Configs round-trip through JSON. Missing keys take their defaults; unknown
keys are rejected so a misspelled weight never silently falls back.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass(frozen=True)
class LossWeights:
    lambda_subj: float = 0.5
    lambda_decouple: float = 0.1
    lambda_mask: float = 0.1
    lambda_contrast: float = 0.1
    lambda_orth: float = 1.0
    lambda_cov: float = 1.0
    lambda_info: float = 0.01
    lambda_sparse_feat: float = 1e-4
    lambda_sim: float = 1.0
    lambda_sparse_mask: float = 1e-3
    lambda_size: float = 1.0
    lambda_contrast_task: float = 1.0
    lambda_contrast_subj: float = 1.0
    alpha_size: float = 0.5
    tau: float = 0.5
    # signed cosine for the mask similarity by default; True switches to |cos|
    abs_mask_similarity: bool = False
    # per-side cap on the covariance trace in the information term; None disables
    info_trace_clamp: float | None = 1e3

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name.startswith("lambda_") and getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be >= 0")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if not 0 < self.alpha_size < 1:
            raise ConfigError("alpha_size must lie in (0, 1)")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class Ablation:
    disable_stap: bool = False
    disable_personal_branch: bool = False
    disable_common_branch: bool = False
    disable_orth: bool = False
    disable_cov: bool = False
    disable_info: bool = False
    disable_sparse_feat: bool = False


# row label -> ablation flags, in ablation-table order
ABLATION_ROWS: dict[str, Ablation] = {
    "full": Ablation(),
    "w/o STAP": Ablation(disable_stap=True),
    "w/o PP": Ablation(disable_personal_branch=True),
    "w/o CP": Ablation(disable_common_branch=True),
    "w/o VO": Ablation(disable_orth=True),
    "w/o CO": Ablation(disable_cov=True),
    "w/o MIM": Ablation(disable_info=True),
    "w/o SR": Ablation(disable_sparse_feat=True),
}


@dataclass(frozen=True)
class PtsmConfig:
    n_channels: int = 8
    n_times: int = 128
    n_classes: int = 2
    n_subjects: int = 6
    pooled_len: int = 16
    feature_dim: int = 64
    spatial_hidden: int = 64
    temporal_hidden: int = 16
    temporal_kernel: int = 7
    dropout: float = 0.5
    fusion_learnable: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: Ablation = field(default_factory=Ablation)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    adapt_steps: int = 50
    adapt_lr: float = 1e-3
    adapt_optimizer: str = "adam"

    def __post_init__(self):
        for name in ("n_channels", "n_times", "n_classes", "n_subjects", "pooled_len", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_times < self.pooled_len:
            raise ConfigError("n_times must be >= pooled_len")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.adapt_optimizer not in ("adam", "sgd"):
            raise ConfigError("adapt_optimizer must be 'adam' or 'sgd'")

    def replace(self, **changes) -> "PtsmConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PtsmConfig":
        return _build(cls, data, "config")

    @classmethod
    def load(cls, path: str | Path) -> "PtsmConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)


_NESTED = {"weights": LossWeights, "ablation": Ablation, "optimizer": OptimizerConfig}


def _build(cls, data: dict[str, Any], where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and cls is PtsmConfig:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            value = _build(_NESTED[key], value, f"{where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def set_dotted(cfg: PtsmConfig, key: str, value) -> PtsmConfig:
    """Return a copy with ``key`` (e.g. ``"weights.lambda_orth"``) set to ``value``."""
    data = cfg.to_dict()
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value
    return PtsmConfig.from_dict(data)
