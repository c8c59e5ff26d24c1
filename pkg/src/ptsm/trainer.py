"""Training: one optimisation step, the epoch loop with early stopping,
few-shot personalisation and a small grid-search driver."""

from __future__ import annotations

import copy
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import losses, stap
from . import tensor as T
from .config import PtsmConfig, set_dotted
from .errors import CheckpointError, ContractError
from .losses import LossReport
from .metrics import compute_metrics
from .model import ForwardResult, Wiring, apply_ablation, forward, init_state_arrays, predict_proba
from .storage import atomic_write_bytes, decode_checkpoint, encode_checkpoint
from .synthdata import EegTrial, stack
from .tensor import Tensor
from .tsfd import argmax_labels

log = logging.getLogger(__name__)

__all__ = [
    "TrainState",
    "init_state",
    "train_step",
    "fit",
    "adapt_few_shot",
    "grid_search",
    "apply_ablation",
    "EarlyStopping",
]


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    rng_state: dict
    step: int = 0
    epoch: int = 0

    def copy(self) -> "TrainState":
        return TrainState(
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            rng_state=copy.deepcopy(self.rng_state),
            step=self.step,
            epoch=self.epoch,
        )

    def rng(self) -> np.random.Generator:
        bg = np.random.PCG64()
        bg.state = copy.deepcopy(self.rng_state)
        return np.random.Generator(bg)


def init_state(cfg: PtsmConfig) -> TrainState:
    init_seq, stream_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    params, buffers = init_state_arrays(cfg, np.random.default_rng(init_seq))
    return TrainState(
        params=params,
        buffers=buffers,
        adam_m={k: np.zeros_like(v) for k, v in params.items()},
        adam_v={k: np.zeros_like(v) for k, v in params.items()},
        rng_state=np.random.PCG64(stream_seq).state,
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, cfg: PtsmConfig, path: str | Path) -> None:
    header = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "step": state.step,
        "epoch": state.epoch,
        "rng_state": state.rng_state,
    }
    tensors = {"param": state.params, "buffer": state.buffers, "adam_m": state.adam_m, "adam_v": state.adam_v}
    atomic_write_bytes(path, encode_checkpoint(tensors, header))


def load_checkpoint(path: str | Path) -> tuple[TrainState, PtsmConfig]:
    tensors, header = decode_checkpoint(Path(path).read_bytes())
    cfg = PtsmConfig.from_dict(header["config"])
    if cfg.config_hash() != header["config_hash"]:
        raise CheckpointError("config hash in checkpoint does not match its config")
    state = TrainState(
        params=tensors.get("param", {}),
        buffers=tensors.get("buffer", {}),
        adam_m=tensors.get("adam_m", {}),
        adam_v=tensors.get("adam_v", {}),
        rng_state=header["rng_state"],
        step=header["step"],
        epoch=header["epoch"],
    )
    return state, cfg


# ---------------------------------------------------------------------------
# one step


def _no_decay(name: str) -> bool:
    return (
        (name.startswith("stap.") and name.endswith(".b"))
        or ".bn" in name
        or name.startswith("stap.fusion.")
    )


def trainable_names(params: Iterable[str], wiring: Wiring) -> list[str]:
    names = []
    for n in params:
        if n.startswith("stap.fusion.") and not wiring.fusion_trainable:
            continue
        if n.startswith("stap.") and not wiring.use_masks:
            continue
        names.append(n)
    return names


def adam_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adam step with decoupled weight decay; returns new (param, m, v).

    With a zero gradient and zero moments the result is exactly
    ``p * (1 - lr * weight_decay)``.
    """
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    p_new = p * (1 - lr * weight_decay) if weight_decay else p.copy()
    p_new = p_new - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p_new, m, v


def compute_losses(fr: ForwardResult, y: np.ndarray, s: np.ndarray, wiring: Wiring) -> LossReport:
    w = wiring.weights
    m = fr.masks
    m_p = stap.outer_flatten(m.m_t_p, m.m_s_p)
    m_c = stap.outer_flatten(m.m_t_c, m.m_s_c)
    f_task, f_subj = fr.latents.f_task, fr.latents.f_subj
    task, clamp_t = losses.cross_entropy(fr.p_task, y, return_info=True)
    subj, clamp_s = losses.cross_entropy(fr.p_subj, s, return_info=True)
    ct, deg_t = losses.nt_xent(f_task, y, w.tau)
    cs, deg_s = losses.nt_xent(f_subj, s, w.tau)
    components = {
        "task": task,
        "subj": subj,
        "sim": losses.mask_similarity(m_p, m_c, absolute=w.abs_mask_similarity),
        "sparse_mask": losses.mask_sparsity(m_p, m_c),
        "size": losses.mask_size(m_p, m_c, w.alpha_size),
        "orth": losses.orthogonality(f_task, f_subj),
        "cov": losses.covariance_decorrelation(f_task, f_subj),
        "info": losses.info_retention(f_task, f_subj, w.info_trace_clamp),
        "sparse_feat": losses.feature_sparsity(f_task, f_subj),
        "contrast_task": ct,
        "contrast_subj": cs,
    }
    return losses.total_loss(
        components, w, ce_clamped=clamp_t + clamp_s, contrast_degenerate=int(deg_t) + int(deg_s)
    )


def _as_batch(batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 3 and isinstance(batch[0], np.ndarray):
        return batch
    return stack(batch)


def train_step(
    batch: Sequence[EegTrial] | tuple[np.ndarray, np.ndarray, np.ndarray],
    state: TrainState,
    cfg: PtsmConfig,
    wiring: Wiring | None = None,
) -> tuple[TrainState, LossReport]:
    """One Adam step on the weighted total loss. ``state`` is not modified."""
    wiring = wiring or apply_ablation(cfg)
    x, y, s = _as_batch(batch)
    if len(x) < 2:
        raise ContractError("a training batch needs at least 2 trials (batch statistics, covariance terms)")
    rng = state.rng()
    names = trainable_names(state.params, wiring)
    leaves = {n: Tensor(state.params[n], requires_grad=True) for n in names}
    view = {n: leaves.get(n, state.params[n]) for n in state.params}
    fr = forward(view, state.buffers, x, cfg, wiring, training=True, rng=rng)
    report = compute_losses(fr, y, s, wiring)
    grads = T.backward(report.tensor, leaves.values())

    opt = cfg.optimizer
    t = state.step + 1
    new = TrainState(
        params=dict(state.params),
        buffers={**state.buffers, **fr.buffer_updates},
        adam_m=dict(state.adam_m),
        adam_v=dict(state.adam_v),
        rng_state=rng.bit_generator.state,
        step=t,
        epoch=state.epoch,
    )
    for n, leaf in leaves.items():
        wd = 0.0 if _no_decay(n) else opt.weight_decay
        new.params[n], new.adam_m[n], new.adam_v[n] = adam_update(
            state.params[n], grads[leaf], state.adam_m[n], state.adam_v[n], t,
            opt.lr, opt.beta1, opt.beta2, opt.eps, wd,
        )
    return new, report


# ---------------------------------------------------------------------------
# epochs


class EarlyStopping:
    """Tracks the best metric.

    A tie on the metric counts as an improvement only when a strictly lower
    ``loss`` is supplied; otherwise ties do not reset patience.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.best_loss: float | None = None
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, metric: float, loss: float | None = None) -> bool:
        better = self.best is None or metric > self.best
        if not better and metric == self.best and loss is not None:
            better = self.best_loss is None or loss < self.best_loss
        if better:
            self.best, self.best_loss, self.best_epoch, self.bad_epochs = metric, loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def best_history_row(history: Sequence[dict]) -> dict | None:
    """The history row whose snapshot :func:`fit` returns."""
    stopper = EarlyStopping(patience=len(history) + 1)
    for row in history:
        stopper.update(row["epoch"], row["val_acc"], row.get("val_loss"))
    return next((r for r in history if r["epoch"] == stopper.best_epoch), None)


def evaluate_accuracy(state: TrainState, trials: Sequence[EegTrial], cfg: PtsmConfig) -> dict[str, float]:
    """Validation accuracy, macro F1 and task cross-entropy (the tie-breaker)."""
    x, y, _ = stack(trials)
    probs = predict_proba(state.params, state.buffers, x, cfg)
    rep = compute_metrics(argmax_labels(probs), y, cfg.n_classes)
    loss = float(losses.cross_entropy(probs, y).data)
    return {"val_acc": rep.accuracy, "val_f1": rep.macro_f1, "val_loss": loss}


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if out and len(out[-1]) < 2:
        out.pop()
    return out


def fit(
    train: Sequence[EegTrial],
    val: Sequence[EegTrial],
    cfg: PtsmConfig,
    evaluate: Callable[[TrainState, Sequence[EegTrial], PtsmConfig], dict[str, float]] = evaluate_accuracy,
    state: TrainState | None = None,
) -> tuple[TrainState, list[dict]]:
    """Train with early stopping on validation accuracy (validation loss breaks ties).

    Returns the snapshot from the best validation epoch and one history row
    per epoch (mean loss terms over the epoch's steps plus validation metrics).
    """
    if not train or not val:
        raise ContractError("training and validation splits must both be non-empty")
    wiring = apply_ablation(cfg)
    state = state.copy() if state is not None else init_state(cfg)
    history: list[dict] = []
    if cfg.max_epochs <= 0:
        return state, history
    x, y, s = stack(train)
    stopper = EarlyStopping(cfg.patience)
    best = state.copy()
    for epoch in range(1, cfg.max_epochs + 1):
        rng = state.rng()
        order = _batches(len(x), cfg.batch_size, rng)
        state.rng_state = rng.bit_generator.state
        reports = []
        for idx in order:
            state, rep = train_step((x[idx], y[idx], s[idx]), state, cfg, wiring)
            reports.append(rep)
        state.epoch = epoch
        metrics = evaluate(state, val, cfg)
        row = {"epoch": epoch, **LossReport.average(reports).as_row(), **metrics}
        history.append(row)
        log.debug("epoch %d: total %.4f val_acc %.4f", epoch, row["total"], metrics["val_acc"])
        if stopper.update(epoch, metrics["val_acc"], metrics.get("val_loss")):
            best = state.copy()
        if stopper.should_stop:
            break
    return best, history


# ---------------------------------------------------------------------------
# few-shot personalisation


def adapt_few_shot(
    state: TrainState,
    support: Sequence[EegTrial],
    cfg: PtsmConfig,
    steps: int | None = None,
    eta: float | None = None,
    optimizer: str | None = None,
) -> TrainState:
    """Fine-tune only the personalized mask generators on ``support`` with the task loss.

    The network runs in evaluation mode (running batch-norm statistics, no
    dropout), so every tensor outside the personalized generators, including
    the optimizer moments and batch-norm buffers, is left bit-identical.
    """
    if not support:
        raise ContractError("few-shot support set is empty")
    steps = cfg.adapt_steps if steps is None else steps
    eta = cfg.adapt_lr if eta is None else eta
    optimizer = optimizer or cfg.adapt_optimizer
    wiring = apply_ablation(cfg)
    new = state.copy()
    names = stap.personal_param_names(new.params)
    if steps <= 0 or not wiring.use_masks:
        return new
    x, y, _ = stack(support)
    m = {n: np.zeros_like(new.params[n]) for n in names}
    v = {n: np.zeros_like(new.params[n]) for n in names}
    opt = cfg.optimizer
    for t in range(1, steps + 1):
        leaves = {n: Tensor(new.params[n], requires_grad=True) for n in names}
        view = {n: leaves.get(n, new.params[n]) for n in new.params}
        fr = forward(view, new.buffers, x, cfg, wiring, training=False, with_subject=False)
        loss = losses.cross_entropy(fr.p_task, y)
        grads = T.backward(loss, leaves.values())
        for n, leaf in leaves.items():
            if optimizer == "sgd":
                new.params[n] = new.params[n] - eta * grads[leaf]
            else:
                new.params[n], m[n], v[n] = adam_update(
                    new.params[n], grads[leaf], m[n], v[n], t, eta, opt.beta1, opt.beta2, opt.eps, 0.0
                )
    return new


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridResult:
    best: PtsmConfig
    table: list[dict] = field(default_factory=list)


def grid_search(
    template: PtsmConfig,
    grid: Mapping[str, Sequence],
    train: Sequence[EegTrial],
    val: Sequence[EegTrial],
    runner: Callable[[PtsmConfig], tuple[TrainState, list[dict]]] | None = None,
) -> GridResult:
    """Exhaustive search over dotted config keys, e.g. ``{"weights.lambda_orth": [0.1, 1]}``.

    Ranked by best validation accuracy, then lower total loss at that epoch,
    then grid order (lexicographic over the value indices).
    """
    keys = list(grid)
    runner = runner or (lambda c: fit(train, val, c))
    rows = []
    configs = []
    for order, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        cfg = template
        for k, val_ in zip(keys, values):
            cfg = set_dotted(cfg, k, val_)
        _, history = runner(cfg)
        if history:
            best_row = best_history_row(history)
            acc, total, f1 = best_row["val_acc"], best_row["total"], best_row.get("val_f1", float("nan"))
        else:
            acc, total, f1 = float("-inf"), float("inf"), float("nan")
        rows.append({**dict(zip(keys, values)), "val_acc": acc, "val_f1": f1, "total": total, "order": order})
        configs.append(cfg)
    if not rows:
        raise ContractError("empty grid")
    winner = min(range(len(rows)), key=lambda i: (-rows[i]["val_acc"], rows[i]["total"], rows[i]["order"]))
    return GridResult(best=configs[winner], table=rows)
