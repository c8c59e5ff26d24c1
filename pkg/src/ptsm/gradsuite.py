"""Finite-difference checks for every primitive, every loss term and the full model.

Inputs are drawn away from the kinks of ``abs``/``relu``/``clip_min`` and
the domain edges of ``log``/``sqrt`` so that central differences are valid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses, stap
from . import tensor as T
from .config import LossWeights, PtsmConfig
from .model import forward
from .tensor import GradCheckReport, Tensor, grad_check

MIN_PROBES = 100


@dataclass
class SuiteEntry:
    name: str
    report: GradCheckReport

    def as_row(self) -> dict:
        return {
            "name": self.name,
            "max_rel_err": self.report.worst,
            "n_probes": self.report.n_probes,
            "ok": self.report.ok,
        }


def _away(rng: np.random.Generator, shape, lo: float = 0.2, hi: float = 1.5) -> np.ndarray:
    """Random values with magnitude in [lo, hi] and random sign."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _leaf(a: np.ndarray) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # random projection so every output entry influences the checked scalar
    return T.tsum(out * w)


Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]


def _unary(fn, lo=0.2, hi=1.5, positive=False, shape=(4, 6)):
    def case(rng):
        data = rng.uniform(lo, hi, shape) if positive else _away(rng, shape, lo, hi)
        a = _leaf(data)
        w = rng.standard_normal(fn(Tensor(data)).shape)
        return (lambda: _weighted(fn(a), w)), {"a": a}

    return case


def _binary(fn, shape_a=(4, 6), shape_b=(4, 6), positive_b=False):
    def case(rng):
        a = _leaf(rng.standard_normal(shape_a))
        b = _leaf(rng.uniform(0.5, 2.0, shape_b) if positive_b else rng.standard_normal(shape_b))
        w = rng.standard_normal(fn(Tensor(a.data), Tensor(b.data)).shape)
        return (lambda: _weighted(fn(a, b), w)), {"a": a, "b": b}

    return case


def _conv(rng):
    x = _leaf(rng.standard_normal((3, 2, 9)))
    w_ = _leaf(rng.standard_normal((4, 2, 3)))
    b = _leaf(rng.standard_normal(4))
    proj = rng.standard_normal((3, 4, 9))
    return (lambda: _weighted(T.conv1d(x, w_, b, padding=1), proj)), {"x": x, "w": w_, "b": b}


def _bn(rng):
    x = _leaf(rng.standard_normal((6, 3, 5)))
    g = _leaf(rng.uniform(0.5, 1.5, 3))
    b = _leaf(rng.standard_normal(3))
    proj = rng.standard_normal((6, 3, 5))
    rm, rv = np.zeros(3), np.ones(3)
    return (lambda: _weighted(T.batch_norm(x, g, b, rm, rv, training=True)[0], proj)), {
        "x": x,
        "gamma": g,
        "beta": b,
    }


def _dropout(rng):
    x = _leaf(rng.standard_normal((5, 8)))
    proj = rng.standard_normal((5, 8))
    # same mask on every evaluation
    return (lambda: _weighted(T.dropout(x, 0.5, True, np.random.default_rng(3)), proj)), {"x": x}


def _concat(rng):
    a = _leaf(rng.standard_normal((2, 3)))
    b = _leaf(rng.standard_normal((4, 3)))
    proj = rng.standard_normal((6, 3))
    return (lambda: _weighted(T.concat([a, b], axis=0), proj)), {"a": a, "b": b}


PRIMITIVE_CASES: dict[str, Case] = {
    "add": _binary(T.add, shape_b=(6,)),
    "sub": _binary(T.sub, shape_b=(4, 1)),
    "neg": _unary(T.neg),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "matmul": _binary(T.matmul, shape_a=(4, 5), shape_b=(5, 3)),
    "conv1d": _conv,
    "sigmoid": _unary(T.sigmoid, 0.0, 3.0),
    "elu": _unary(T.elu),
    "relu": _unary(T.relu),
    "softmax": _unary(lambda a: T.softmax(a, axis=1), 0.0, 2.0),
    "log": _unary(T.log, 0.2, 3.0, positive=True),
    "exp": _unary(T.exp, 0.0, 1.5),
    "abs": _unary(T.tabs),
    "sqrt": _unary(T.sqrt, 0.2, 3.0, positive=True),
    "clip_min": _unary(lambda a: T.clip_min(a, 0.1)),
    "sum": _unary(lambda a: T.tsum(a, axis=0)),
    "mean": _unary(lambda a: T.mean(a, axis=1, keepdims=True)),
    "l1_norm": _unary(lambda a: T.l1_norm(a, axis=1)),
    "l2_norm": _unary(lambda a: T.l2_norm(a, axis=1)),
    "frobenius_norm": _unary(T.frobenius_norm),
    "trace": _unary(T.trace, shape=(5, 5)),
    "batch_cov": _binary(T.batch_cov, shape_a=(7, 3), shape_b=(7, 4)),
    "batch_norm": _bn,
    "dropout": _dropout,
    "adaptive_avg_pool1d": _unary(lambda a: T.adaptive_avg_pool1d(a, 4), shape=(2, 3, 11)),
    "reshape": _unary(lambda a: T.reshape(a, (3, 8))),
    "transpose": _unary(lambda a: T.transpose(a)),
    "concat": _concat,
    "getitem": _unary(lambda a: a[np.array([0, 2, 2, 3]), 1:4]),
}


def _emb_pair(rng, n=8, d=5):
    # cosines well away from zero keep |cos| differentiable at the probe point
    base = rng.standard_normal((n, d))
    a = _leaf(base + 0.3 * rng.standard_normal((n, d)))
    b = _leaf(base * rng.choice([-1.0, 1.0], size=(n, 1)) + 0.3 * rng.standard_normal((n, d)))
    return a, b


def _loss_pair(fn):
    def case(rng):
        a, b = _emb_pair(rng)
        return (lambda: fn(a, b)), {"a": a, "b": b}

    return case


def _mask_pair(fn):
    def case(rng):
        lp = _leaf(rng.standard_normal((4, 12)))
        lc = _leaf(rng.standard_normal((4, 12)))
        return (lambda: fn(T.sigmoid(lp), T.sigmoid(lc))), {"logits_p": lp, "logits_c": lc}

    return case


def _ce(rng):
    logits = _leaf(rng.standard_normal((6, 3)))
    y = rng.integers(0, 3, 6)
    return (lambda: losses.cross_entropy(T.softmax(logits, axis=1), y)), {"logits": logits}


def _nt_xent(rng):
    z = _leaf(rng.standard_normal((8, 5)))
    y = np.array([0, 0, 1, 1, 2, 2, 0, 3])
    return (lambda: losses.nt_xent(z, y, 0.5)[0]), {"z": z}


LOSS_CASES: dict[str, Case] = {
    "cross_entropy": _ce,
    "mask_similarity": _mask_pair(losses.mask_similarity),
    "mask_similarity_abs": _mask_pair(lambda p, c: losses.mask_similarity(p, c, absolute=True)),
    "mask_sparsity": _mask_pair(losses.mask_sparsity),
    "mask_size": _mask_pair(lambda p, c: losses.mask_size(p, c, 0.2)),
    "orthogonality": _loss_pair(losses.orthogonality),
    "covariance_decorrelation": _loss_pair(losses.covariance_decorrelation),
    "info_retention": _loss_pair(losses.info_retention),
    "feature_sparsity": _loss_pair(losses.feature_sparsity),
    "nt_xent": _nt_xent,
}


def composite_case(rng: np.random.Generator, n_params: int | None = None):
    """Full forward pass in training mode plus the weighted total loss.

    Uses a small input (4 channels, 16 samples) and unit loss weights so every
    term contributes a well-scaled gradient. Dropout draws the same mask on
    each evaluation.
    """
    from .model import apply_ablation, init_state_arrays
    from .trainer import compute_losses

    cfg = PtsmConfig(n_channels=4, n_times=16, n_classes=3, n_subjects=3, pooled_len=4, feature_dim=8)
    unit = LossWeights(
        lambda_subj=1.0, lambda_decouple=1.0, lambda_mask=1.0, lambda_contrast=1.0,
        lambda_info=0.1, lambda_sparse_feat=0.01, lambda_sparse_mask=0.01, alpha_size=0.1,
    )
    cfg = cfg.replace(weights=unit)
    arrays, buffers = init_state_arrays(cfg, rng)
    # move fusion logits off 0 so alpha and beta differ
    arrays["stap.fusion.alpha_logit"] = np.array([0.3])
    arrays["stap.fusion.beta_logit"] = np.array([-0.4])
    params = {k: _leaf(v) for k, v in arrays.items()}
    x = rng.standard_normal((6, cfg.n_channels, cfg.n_times))
    y = np.array([0, 1, 2, 0, 1, 2])
    s = np.array([0, 0, 1, 1, 2, 2])
    wiring = apply_ablation(cfg)

    def f():
        fr = forward(params, buffers, x, cfg, wiring, training=True, rng=np.random.default_rng(11))
        return compute_losses(fr, y, s, wiring).tensor

    return f, params


def run_case(case: Case, seed: int, probes: int, step: float, tol: float) -> GradCheckReport:
    """Probe ``case`` at fresh random points until ``probes`` entries are checked."""
    total = GradCheckReport(step=step, tol=tol)
    draw = 0
    while total.n_probes < probes:
        rng = np.random.default_rng([seed, draw])
        f, params = case(rng)
        rep = grad_check(f, params, step=step, tol=tol, probes=probes - total.n_probes, rng=rng)
        for k, v in rep.max_rel_err.items():
            total.max_rel_err[k] = max(total.max_rel_err.get(k, 0.0), v)
        total.failures += rep.failures
        total.n_probes += rep.n_probes
        draw += 1
    return total


def run_suite(
    seed: int = 0,
    probes: int = MIN_PROBES,
    step: float = 1e-5,
    tol: float = 1e-4,
    include: tuple[str, ...] = ("primitives", "losses", "composite"),
) -> list[SuiteEntry]:
    cases: dict[str, Case] = {}
    if "primitives" in include:
        cases.update({f"primitive.{k}": v for k, v in PRIMITIVE_CASES.items()})
    if "losses" in include:
        cases.update({f"loss.{k}": v for k, v in LOSS_CASES.items()})
    if "composite" in include:
        cases["composite.total"] = composite_case
    return [SuiteEntry(name, run_case(case, seed, probes, step, tol)) for name, case in cases.items()]
