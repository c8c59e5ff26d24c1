"""Classification metrics: accuracy, macro F1, sensitivity and specificity."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    sensitivity: float
    specificity: float
    confusion: list[list[int]]
    n: int
    per_class_f1: list[float] = field(default_factory=list)
    # classes that occur in neither predictions nor labels (scored F1 = 0)
    absent_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def percentages(self) -> dict[str, str]:
        """Headline metrics as percentage strings with two decimals."""
        return {
            "ACC": f"{100 * self.accuracy:.2f}",
            "F1": f"{100 * self.macro_f1:.2f}",
            "SEN": f"{100 * self.sensitivity:.2f}",
            "SPE": f"{100 * self.specificity:.2f}",
        }


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    """``cm[true, predicted]`` counts."""
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.shape != y.shape:
        raise ContractError(f"{p.size} predictions for {y.size} labels")
    if p.size and (min(p.min(), y.min()) < 0 or max(p.max(), y.max()) >= n_classes):
        raise ContractError(f"class index outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den else 0.0


def compute_metrics(predictions, labels, n_classes: int) -> MetricsReport:
    """ACC, macro-F1, SEN, SPE.

    For two classes, class 1 is the positive class and SEN/SPE are the usual
    true-positive and true-negative rates. For more classes SEN and SPE are
    macro-averaged one-vs-rest.
    """
    if n_classes < 2:
        raise ContractError("need at least two classes")
    cm = confusion_matrix(predictions, labels, n_classes)
    n = int(cm.sum())
    if n == 0:
        raise ContractError("no predictions to score")
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = n - tp - fp - fn
    f1 = [_ratio(2 * tp[k], 2 * tp[k] + fp[k] + fn[k]) for k in range(n_classes)]
    absent = [k for k in range(n_classes) if tp[k] + fp[k] + fn[k] == 0]
    if n_classes == 2:
        sen = _ratio(tp[1], tp[1] + fn[1])
        spe = _ratio(tn[1], tn[1] + fp[1])
    else:
        sen = float(np.mean([_ratio(tp[k], tp[k] + fn[k]) for k in range(n_classes)]))
        spe = float(np.mean([_ratio(tn[k], tn[k] + fp[k]) for k in range(n_classes)]))
    return MetricsReport(
        accuracy=float(np.trace(cm) / n),
        macro_f1=float(np.mean(f1)),
        sensitivity=sen,
        specificity=spe,
        confusion=cm.tolist(),
        n=n,
        per_class_f1=f1,
        absent_classes=absent,
    )
