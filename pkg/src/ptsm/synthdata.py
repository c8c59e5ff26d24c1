"""Synthetic cross-subject EEG with planted task and subject structure.

Each trial is the sum of three parts::

    x = task_gain * loading (x) template[y]          # same channel loading for everyone
      + gain[s] * signature[s] (x) drift[s]          # subject-specific, fixed per subject
      + N(0, noise_std^2)

Templates are zero-mean, unit-norm smoothed random waveforms (5-sample moving
average) centred across classes, so averaging a subject's trials over tasks
cancels the task part exactly. A subject's drift is a slower (15-sample)
random waveform. ``drift_task_overlap`` (0 by default) blends in a random
combination of the task templates, so subject activity can resemble task
activity. Signatures are "dense" random unit vectors by default, or "focal"
(one dominant channel per subject, distinct across subjects where possible,
plus a weak random spread). ``subject_jitter`` scales the subject part per
trial; at 0 it is identical across a subject's trials.
The finished dataset is z-scored per channel; the statistics used are kept
in the metadata so raw values can be recovered.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

TEMPLATE_SMOOTHING = 5
DRIFT_SMOOTHING = 15
MIN_SEPARATION = 0.1


@dataclass
class EegTrial:
    x: np.ndarray
    y: int
    s: int


@dataclass(frozen=True)
class SyntheticSpec:
    n_channels: int = 8
    n_times: int = 128
    n_classes: int = 2
    n_subjects: int = 6
    trials_per_pair: int = 40
    noise_std: float = 0.5
    task_gain: float = 0.5
    subject_gain: float = 6.0
    # per-subject gain is subject_gain * U(1 - spread, 1 + spread)
    gain_spread: float = 0.5
    drift_task_overlap: float = 0.0
    # each trial scales its subject component by U(1 - jitter, 1 + jitter)
    subject_jitter: float = 0.0
    signature_kind: str = "dense"
    signature_spread: float = 0.1
    zscore: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.n_channels, self.n_times, self.n_classes, self.n_subjects) < 1:
            raise ContractError("sizes must be positive")
        if self.n_classes > 1 and self.n_times < 3:
            raise ContractError("n_times too short for distinct templates")
        if self.trials_per_pair < 1:
            raise ContractError("trials_per_pair must be positive")
        if self.noise_std < 0 or self.subject_gain < 0 or not 0 <= self.gain_spread <= 1:
            raise ContractError("noise_std, subject_gain must be >= 0 and gain_spread in [0, 1]")
        if not 0 <= self.subject_jitter <= 1:
            raise ContractError("subject_jitter must be in [0, 1]")
        if not 0 <= self.drift_task_overlap < 1:
            raise ContractError("drift_task_overlap must be in [0, 1)")
        if self.signature_kind not in ("focal", "dense"):
            raise ContractError(f"unknown signature_kind {self.signature_kind!r}")


@dataclass
class PlantedStructure:
    """The exact ingredients a dataset was built from (before z-scoring)."""

    templates: np.ndarray  # (K, T)
    loading: np.ndarray  # (C,)
    signatures: np.ndarray  # (S, C)
    drifts: np.ndarray  # (S, T)
    gains: np.ndarray  # (S,)
    channel_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    channel_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def task_component(self, y: int, task_gain: float) -> np.ndarray:
        return task_gain * np.outer(self.loading, self.templates[y])

    def subject_component(self, s: int) -> np.ndarray:
        return self.gains[s] * np.outer(self.signatures[s], self.drifts[s])


def _smooth_unit(rng: np.random.Generator, n: int, length: int, width: int) -> np.ndarray:
    raw = rng.standard_normal((n, length + width - 1))
    kernel = np.ones(width) / width
    out = np.stack([np.convolve(r, kernel, mode="valid") for r in raw])
    out -= out.mean(axis=1, keepdims=True)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _min_distance(v: np.ndarray) -> float:
    if len(v) < 2:
        return np.inf
    return min(np.linalg.norm(a - b) for a, b in itertools.combinations(v, 2))


def _centred_templates(rng: np.random.Generator, k: int, t: int) -> np.ndarray:
    while True:
        tpl = _smooth_unit(rng, k, t, TEMPLATE_SMOOTHING)
        if k > 1:
            tpl -= tpl.mean(axis=0)
            tpl /= np.linalg.norm(tpl, axis=1, keepdims=True)
        if _min_distance(tpl) > MIN_SEPARATION:
            return tpl


def _signatures(rng: np.random.Generator, s: int, c: int, kind: str, spread: float) -> np.ndarray:
    while True:
        if kind == "focal":
            sig = spread * rng.standard_normal((s, c))
            # every channel is used once before any channel repeats
            hot = np.concatenate([rng.permutation(c) for _ in range(-(-s // c))])[:s]
            sig[np.arange(s), hot] += 1.0
        else:
            sig = rng.standard_normal((s, c))
        sig /= np.linalg.norm(sig, axis=1, keepdims=True)
        if _min_distance(sig) > MIN_SEPARATION:
            return sig


def _drifts(rng: np.random.Generator, templates: np.ndarray, s: int, overlap: float) -> np.ndarray:
    slow = _smooth_unit(rng, s, templates.shape[1], DRIFT_SMOOTHING)
    mix = rng.standard_normal((s, len(templates))) @ templates
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    d = overlap * mix + np.sqrt(1 - overlap**2) * slow
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def plant(spec: SyntheticSpec, rng: np.random.Generator) -> PlantedStructure:
    templates = _centred_templates(rng, spec.n_classes, spec.n_times)
    signatures = _signatures(
        rng, spec.n_subjects, spec.n_channels, spec.signature_kind, spec.signature_spread
    )
    drifts = _drifts(rng, templates, spec.n_subjects, spec.drift_task_overlap)
    gains = spec.subject_gain * rng.uniform(
        1 - spec.gain_spread, 1 + spec.gain_spread, size=spec.n_subjects
    )
    return PlantedStructure(templates, np.ones(spec.n_channels), signatures, drifts, gains)


def generate_with_structure(spec: SyntheticSpec) -> tuple[list[EegTrial], PlantedStructure]:
    rng = np.random.default_rng(spec.seed)
    ps = plant(spec, rng)
    xs, ys, ss = [], [], []
    for s in range(spec.n_subjects):
        subj = ps.subject_component(s)
        for y in range(spec.n_classes):
            amp = rng.uniform(1 - spec.subject_jitter, 1 + spec.subject_jitter, spec.trials_per_pair)
            noise = spec.noise_std * rng.standard_normal(
                (spec.trials_per_pair, spec.n_channels, spec.n_times)
            )
            xs.append(ps.task_component(y, spec.task_gain)[None] + amp[:, None, None] * subj[None] + noise)
            ys += [y] * spec.trials_per_pair
            ss += [s] * spec.trials_per_pair
    x = np.concatenate(xs)
    if spec.zscore:
        mu = x.mean(axis=(0, 2))
        sd = x.std(axis=(0, 2))
        sd = np.where(sd > 0, sd, 1.0)
        x = (x - mu[None, :, None]) / sd[None, :, None]
    else:
        mu, sd = np.zeros(spec.n_channels), np.ones(spec.n_channels)
    ps.channel_mean, ps.channel_std = mu, sd
    trials = [EegTrial(x[i], int(ys[i]), int(ss[i])) for i in range(len(x))]
    return trials, ps


def generate(spec: SyntheticSpec) -> list[EegTrial]:
    """Trials ordered by subject, then task. Deterministic in ``spec.seed``."""
    return generate_with_structure(spec)[0]


def metadata(spec: SyntheticSpec, ps: PlantedStructure | None = None) -> dict:
    meta = {"generator": "ptsm.synthdata", "spec": asdict(spec), "noise_model": "iid gaussian"}
    if ps is not None:
        meta["channel_mean"] = ps.channel_mean.tolist()
        meta["channel_std"] = ps.channel_std.tolist()
    return meta


@dataclass(frozen=True)
class SplitPlan:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        groups = [set(self.train), set(self.val), set(self.test)]
        for a, b in itertools.combinations(groups, 2):
            if a & b:
                raise ContractError(f"split groups overlap on subjects {sorted(a & b)}")

    @property
    def subjects(self) -> set[int]:
        return set(self.train) | set(self.val) | set(self.test)


def split(
    trials: Sequence[EegTrial], plan: SplitPlan
) -> tuple[list[EegTrial], list[EegTrial], list[EegTrial]]:
    """Partition trials by subject id."""
    allowed = plan.subjects
    stray = sorted({t.s for t in trials} - allowed)
    if stray:
        raise ContractError(f"subjects {stray} are not covered by the split plan")
    train = [t for t in trials if t.s in plan.train]
    val = [t for t in trials if t.s in plan.val]
    test = [t for t in trials if t.s in plan.test]
    return train, val, test


def stack(trials: Iterable[EegTrial]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    trials = list(trials)
    if not trials:
        return np.zeros((0, 0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    x = np.stack([t.x for t in trials]).astype(np.float64)
    y = np.array([t.y for t in trials], dtype=np.int64)
    s = np.array([t.s for t in trials], dtype=np.int64)
    return x, y, s


def unstack(x: np.ndarray, y: np.ndarray, s: np.ndarray) -> list[EegTrial]:
    return [EegTrial(x[i], int(y[i]), int(s[i])) for i in range(len(x))]
