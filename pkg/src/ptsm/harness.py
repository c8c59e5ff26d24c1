"""Experiment plumbing shared by the CLI: training runs with manifests,
evaluation, mask export, few-shot pre/post scoring and the ablation table."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ABLATION_ROWS, Ablation, PtsmConfig
from .errors import ArtifactError, ConfigError, ContractError
from .metrics import MetricsReport, compute_metrics
from .model import apply_ablation, forward, predict
from .storage import atomic_write_text, file_checksum, load_dataset_full
from .synthdata import EegTrial, SplitPlan, split, stack
from .trainer import TrainState, adapt_few_shot, best_history_row, fit, save_checkpoint

log = logging.getLogger(__name__)

MASK_EXPORT_CHUNK = 256


def artifact_version() -> str:
    """Package version plus a short content hash of the package sources."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# ---------------------------------------------------------------------------
# datasets and splits


def default_plan(subjects: Sequence[int], test: Sequence[int], val: Sequence[int] | None = None) -> SplitPlan:
    """Test subjects as given; validation defaults to the highest remaining id."""
    subjects = sorted(set(subjects))
    test = tuple(sorted(set(test)))
    missing = sorted(set(test) - set(subjects))
    if missing:
        raise ContractError(f"test subjects {missing} are not in the dataset")
    rest = [s for s in subjects if s not in test]
    if val is None:
        if len(rest) < 2:
            raise ContractError("need at least two non-test subjects for train and validation")
        val = (rest[-1],)
    val = tuple(sorted(set(val)))
    train = tuple(s for s in rest if s not in val)
    if not train:
        raise ContractError("no subjects left for training")
    return SplitPlan(train, val, test)


def config_for_dataset(header: dict, cfg: PtsmConfig | None = None) -> PtsmConfig:
    """Fill data dimensions from the dataset header, or check a given config against it."""
    dims = {
        "n_channels": header["n_channels"],
        "n_times": header["n_times"],
        "n_classes": header["n_classes"],
        "n_subjects": header["n_subjects"],
    }
    if cfg is None:
        return PtsmConfig(**dims)
    bad = {k: (getattr(cfg, k), v) for k, v in dims.items() if getattr(cfg, k) != v}
    if bad:
        detail = ", ".join(f"{k}: config {a} vs dataset {b}" for k, (a, b) in bad.items())
        raise ConfigError(f"config/dataset shape mismatch ({detail})")
    return cfg


# ---------------------------------------------------------------------------
# evaluation and masks


def evaluate(state: TrainState, trials: Sequence[EegTrial], cfg: PtsmConfig) -> MetricsReport:
    if not trials:
        raise ContractError("no trials to evaluate")
    x, y, _ = stack(trials)
    return compute_metrics(predict(state.params, state.buffers, x, cfg), y, cfg.n_classes)


def mask_arrays(state: TrainState, x: np.ndarray, cfg: PtsmConfig) -> dict[str, np.ndarray]:
    """Evaluation-mode masks for a batch: fused, per-branch and the fused outer product."""
    wiring = apply_ablation(cfg)
    parts: dict[str, list[np.ndarray]] = {}
    for i in range(0, len(x), MASK_EXPORT_CHUNK):
        fr = forward(state.params, state.buffers, x[i : i + MASK_EXPORT_CHUNK], cfg, wiring, with_subject=False)
        arrays = fr.masks.as_arrays()
        arrays["fused"] = arrays["m_s"][:, :, None] * arrays["m_t"][:, None, :]
        for k, v in arrays.items():
            parts.setdefault(k, []).append(v)
    return {k: np.concatenate(v) for k, v in parts.items()}


def export_masks(state: TrainState, trials: Sequence[EegTrial], cfg: PtsmConfig, path: str | Path) -> dict:
    """Write per-trial masks as JSON and return summary statistics."""
    x, y, s = stack(trials)
    m = mask_arrays(state, x, cfg)
    records = [
        {"index": i, "y": int(y[i]), "s": int(s[i]), **{k: v[i].tolist() for k, v in m.items()}}
        for i in range(len(x))
    ]
    summary = {
        "n_trials": len(records),
        "fused_mean": float(m["fused"].mean()) if len(x) else float("nan"),
        "min": float(min(v.min() for v in m.values())) if len(x) else float("nan"),
        "max": float(max(v.max() for v in m.values())) if len(x) else float("nan"),
    }
    try:
        atomic_write_text(path, json.dumps({"summary": summary, "trials": records}))
    except OSError as exc:
        raise ArtifactError(f"cannot write mask export to {path}: {exc.strerror or exc}") from exc
    return summary


# ---------------------------------------------------------------------------
# few-shot pre/post


@dataclass
class AdaptationResult:
    pre_acc: float
    post_acc: float
    per_subject: dict[int, tuple[float, float]] = field(default_factory=dict)


def support_split(
    trials: Sequence[EegTrial], support_size: int, seed: int
) -> tuple[list[EegTrial], list[EegTrial]]:
    """Random support set of ``support_size`` trials; the rest is held out."""
    if support_size >= len(trials):
        raise ContractError(f"support size {support_size} leaves no held-out trials (have {len(trials)})")
    order = np.random.default_rng(seed).permutation(len(trials))
    return [trials[i] for i in order[:support_size]], [trials[i] for i in order[support_size:]]


def adaptation_eval(
    state: TrainState,
    test: Sequence[EegTrial],
    cfg: PtsmConfig,
    support_size: int = 20,
    seed: int = 0,
) -> AdaptationResult:
    """Held-out accuracy before and after few-shot adaptation, per test subject.

    Each test subject gets its own support set and adapted copy of the
    model; the pooled held-out accuracies are reported as pre/post.
    """
    per_subject = {}
    n_pre = n_post = n = 0
    for subj in sorted({t.s for t in test}):
        trials = [t for t in test if t.s == subj]
        support, held = support_split(trials, support_size, seed + subj)
        pre = evaluate(state, held, cfg).accuracy
        post = evaluate(adapt_few_shot(state, support, cfg), held, cfg).accuracy
        per_subject[subj] = (pre, post)
        n_pre += pre * len(held)
        n_post += post * len(held)
        n += len(held)
    return AdaptationResult(n_pre / n, n_post / n, per_subject)


# ---------------------------------------------------------------------------
# training runs


@dataclass
class RunManifest:
    config: dict
    seed: int
    dataset: str
    dataset_checksum: str
    split: dict
    artifact_version: str
    log_path: str
    checkpoint_path: str
    final_metrics: dict
    mask_export: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    if history:
        writer = csv.DictWriter(buf, fieldnames=list(history[0]), lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


@dataclass
class RunResult:
    state: TrainState
    history: list[dict]
    test_metrics: MetricsReport
    manifest: RunManifest | None = None


def train_and_test(
    trials: Sequence[EegTrial], cfg: PtsmConfig, plan: SplitPlan
) -> tuple[TrainState, list[dict], list[EegTrial]]:
    """Shared by ``train`` and every ablation row."""
    train, val, test = split(trials, plan)
    state, history = fit(train, val, cfg)
    return state, history, test


def run_training(
    dataset: str | Path,
    cfg: PtsmConfig,
    plan: SplitPlan,
    out_dir: str | Path,
    export_mask_file: bool = False,
) -> RunResult:
    """Train, test on the held-out subjects and write checkpoint, log, metrics and manifest."""
    out = Path(out_dir)
    trials, header, _ = load_dataset_full(dataset)
    cfg = config_for_dataset(header, cfg)
    state, history, test = train_and_test(trials, cfg, plan)
    report = evaluate(state, test, cfg)
    ckpt, log_csv = out / "checkpoint.ptsm", out / "log.csv"
    save_checkpoint(state, cfg, ckpt)
    atomic_write_text(log_csv, history_csv(history))
    atomic_write_text(out / "metrics.json", json.dumps(report.to_dict(), indent=2, sort_keys=True))
    mask_path = None
    if export_mask_file:
        mask_path = str(out / "masks.json")
        export_masks(state, test, cfg, mask_path)
    manifest = RunManifest(
        config=cfg.to_dict(),
        seed=cfg.seed,
        dataset=str(Path(dataset).resolve()),
        dataset_checksum=file_checksum(dataset),
        split=dataclasses.asdict(plan),
        artifact_version=artifact_version(),
        log_path=str(log_csv),
        checkpoint_path=str(ckpt),
        final_metrics=report.to_dict(),
        mask_export=mask_path,
    )
    atomic_write_text(out / "manifest.json", manifest.to_json())
    return RunResult(state, history, report, manifest)


def plan_from_manifest(manifest: RunManifest) -> SplitPlan:
    sp = manifest.split
    return SplitPlan(tuple(sp["train"]), tuple(sp["val"]), tuple(sp["test"]))


# ---------------------------------------------------------------------------
# ablation table


ABLATION_COLUMNS = ["row", "seed", "test_acc", "test_f1", "pre_acc", "post_acc", "best_epoch", "epochs_run"]


@dataclass
class AblationRun:
    row: dict
    state: TrainState
    cfg: PtsmConfig
    test: list[EegTrial]


def ablation_run(
    trials: Sequence[EegTrial],
    cfg: PtsmConfig,
    plan: SplitPlan,
    row: str | Ablation,
    support_size: int,
) -> AblationRun:
    """Train one configuration and score it; ``row`` is a table label or explicit flags."""
    flags = ABLATION_ROWS[row] if isinstance(row, str) else row
    cfg = cfg.replace(ablation=flags)
    state, history, test = train_and_test(trials, cfg, plan)
    rep = evaluate(state, test, cfg)
    adapted = adaptation_eval(state, test, cfg, support_size, seed=cfg.seed)
    best_epoch = best_history_row(history)["epoch"] if history else 0
    result = {
        "row": row if isinstance(row, str) else "custom",
        "seed": cfg.seed,
        "test_acc": rep.accuracy,
        "test_f1": rep.macro_f1,
        "pre_acc": adapted.pre_acc,
        "post_acc": adapted.post_acc,
        "best_epoch": best_epoch,
        "epochs_run": len(history),
    }
    return AblationRun(result, state, cfg, list(test))


def ablation_row(
    trials: Sequence[EegTrial], cfg: PtsmConfig, plan: SplitPlan, row: str, support_size: int
) -> dict:
    return ablation_run(trials, cfg, plan, row, support_size).row


def _row_job(args):
    return ablation_row(*args)


def run_ablation(
    trials: Sequence[EegTrial],
    cfg: PtsmConfig,
    plan: SplitPlan,
    rows: Sequence[str] = tuple(ABLATION_ROWS),
    seeds: Sequence[int] = (0,),
    support_size: int = 20,
    jobs: int = 1,
) -> list[dict]:
    """Every (row, seed) pair; independent runs may go to worker processes."""
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}; choose from {list(ABLATION_ROWS)}")
    work = [(trials, cfg.replace(seed=seed), plan, row, support_size) for seed in seeds for row in rows]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_row_job, work))
    return [_row_job(w) for w in work]


def summarize_ablation(results: list[dict]) -> list[dict]:
    """Mean over seeds per row, in first-seen row order."""
    rows: dict[str, list[dict]] = {}
    for r in results:
        rows.setdefault(r["row"], []).append(r)
    out = []
    for name, rs in rows.items():
        out.append(
            {
                "row": name,
                "n_seeds": len(rs),
                **{k: float(np.mean([r[k] for r in rs])) for k in ("test_acc", "test_f1", "pre_acc", "post_acc")},
            }
        )
    return out


def table_csv(rows: list[dict], columns: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(columns or rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()
