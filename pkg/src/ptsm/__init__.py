"""Cross-subject EEG decoding with personalized spatio-temporal masks and
task/subject feature decoupling, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .config import ABLATION_ROWS, Ablation, LossWeights, OptimizerConfig, PtsmConfig
from .errors import PtsmError
from .metrics import MetricsReport, compute_metrics
from .synthdata import EegTrial, SplitPlan, SyntheticSpec, generate, split
from .trainer import TrainState, adapt_few_shot, fit, init_state, train_step

__all__ = [
    "ABLATION_ROWS",
    "Ablation",
    "EegTrial",
    "LossWeights",
    "MetricsReport",
    "OptimizerConfig",
    "PtsmConfig",
    "PtsmError",
    "SplitPlan",
    "SyntheticSpec",
    "TrainState",
    "adapt_few_shot",
    "compute_metrics",
    "fit",
    "generate",
    "init_state",
    "split",
    "train_step",
]
