"""``ptsm`` command line: synth | train | eval | ablate | gradcheck | adapt.

Failures print exactly one line to stderr, ``error: <ErrorClass>: <message>``,
and exit with status 2 (usage and input errors) or 1 (failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import harness
from .config import ABLATION_ROWS, PtsmConfig
from .errors import ConfigError, PtsmError
from .storage import atomic_write_text, load_dataset_full, save_dataset
from .synthdata import SyntheticSpec, generate_with_structure, metadata
from .trainer import adapt_few_shot, load_checkpoint, save_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_config(args) -> PtsmConfig | None:
    cfg = PtsmConfig.load(args.config) if getattr(args, "config", None) else None
    if cfg is not None and getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _dataset_config(args) -> tuple[list, dict, PtsmConfig]:
    trials, header, _ = load_dataset_full(args.dataset)
    cfg = harness.config_for_dataset(header, _load_config(args))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return trials, header, cfg


def _plan(args, trials):
    return harness.default_plan({t.s for t in trials}, args.subjects_test, args.subjects_val)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_channels=args.channels,
        n_times=args.times,
        n_classes=args.classes,
        n_subjects=args.subjects,
        trials_per_pair=args.trials_per_pair,
        noise_std=args.noise_std,
        task_gain=args.task_gain,
        subject_gain=args.subject_gain,
        seed=args.seed if args.seed is not None else 0,
    )
    trials, ps = generate_with_structure(spec)
    path = Path(args.out)
    if path.suffix != ".eegd":
        path = path / "dataset.eegd"
    save_dataset(trials, path, metadata(spec, ps), spec.n_classes, spec.n_subjects)
    _emit({"dataset": str(path), "n_trials": len(trials)})
    return 0


def cmd_train(args) -> int:
    if args.from_manifest:
        man = harness.RunManifest.load(args.from_manifest)
        cfg = PtsmConfig.from_dict(man.config)
        dataset = args.dataset or man.dataset
        result = harness.run_training(dataset, cfg, harness.plan_from_manifest(man), args.out, args.export_masks)
    else:
        if not args.dataset:
            raise UsageError("train needs --dataset or --from-manifest")
        trials, _, cfg = _dataset_config(args)
        result = harness.run_training(args.dataset, cfg, _plan(args, trials), args.out, args.export_masks)
    _emit({"out": str(args.out), "test": result.test_metrics.percentages(), "epochs": len(result.history)})
    return 0


def cmd_eval(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    trials, header, _ = load_dataset_full(args.dataset)
    harness.config_for_dataset(header, cfg)
    wanted = set(args.subjects_test) if args.subjects_test else {t.s for t in trials}
    chosen = [t for t in trials if t.s in wanted]
    report = harness.evaluate(state, chosen, cfg)
    out = Path(args.out)
    atomic_write_text(out / "metrics.json", json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if args.export_masks:
        harness.export_masks(state, chosen, cfg, out / "masks.json")
    _emit({"metrics": report.percentages(), "n": report.n})
    return 0


def cmd_ablate(args) -> int:
    trials, _, cfg = _dataset_config(args)
    rows = args.rows.split(",") if args.rows else list(ABLATION_ROWS)
    base_seed = cfg.seed
    seeds = [base_seed + i for i in range(args.seeds)]
    results = harness.run_ablation(
        trials, cfg, _plan(args, trials), rows, seeds, args.support, jobs=args.jobs
    )
    out = Path(args.out)
    atomic_write_text(out / "ablation_runs.csv", harness.table_csv(results, harness.ABLATION_COLUMNS))
    summary = harness.summarize_ablation(results)
    atomic_write_text(out / "ablation.csv", harness.table_csv(summary))
    _emit({"rows": [{**r, **{k: f"{100 * r[k]:.2f}" for k in ("test_acc", "pre_acc", "post_acc")}} for r in summary]})
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    entries = run_suite(seed=args.seed or 0, probes=args.probes, tol=args.tol)
    rows = [e.as_row() for e in entries]
    worst = max(r["max_rel_err"] for r in rows)
    ok = all(r["ok"] for r in rows)
    report = {"ok": ok, "max_rel_err": worst, "tol": args.tol, "cases": rows}
    if args.out:
        atomic_write_text(Path(args.out) / "gradcheck.json", json.dumps(report, indent=2))
    _emit({"ok": ok, "max_rel_err": worst, "n_cases": len(rows)})
    if not ok:
        bad = [r["name"] for r in rows if not r["ok"]]
        print(f"error: GradCheckFailed: {len(bad)} case(s) above tol {args.tol}: {','.join(bad)}", file=sys.stderr)
        return 1
    return 0


def cmd_adapt(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    trials, header, _ = load_dataset_full(args.dataset)
    harness.config_for_dataset(header, cfg)
    subj = [t for t in trials if t.s == args.subject]
    if not subj:
        raise ConfigError(f"subject {args.subject} has no trials in {args.dataset}")
    seed = cfg.seed if args.seed is None else args.seed
    support, held = harness.support_split(subj, args.support, seed)
    pre = harness.evaluate(state, held, cfg)
    adapted = adapt_few_shot(state, support, cfg, steps=args.steps, eta=args.lr)
    post = harness.evaluate(adapted, held, cfg)
    out = Path(args.out)
    save_checkpoint(adapted, cfg, out / "adapted.ptsm")
    result = {"subject": args.subject, "support": len(support), "pre": pre.to_dict(), "post": post.to_dict()}
    atomic_write_text(out / "adapt_metrics.json", json.dumps(result, indent=2, sort_keys=True))
    _emit({"pre_acc": pre.percentages()["ACC"], "post_acc": post.percentages()["ACC"]})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ptsm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, dataset=True, config=True, split=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        if config:
            sp.add_argument("--config", help="JSON config; unknown keys are rejected")
        if dataset:
            sp.add_argument("--dataset", help="EEGD dataset file")
        if split:
            sp.add_argument("--subjects-test", type=_ints, default=None, help="e.g. 4,5")
            sp.add_argument("--subjects-val", type=_ints, default=None)

    sp = sub.add_parser("synth", help="write a synthetic EEGD dataset")
    common(sp, dataset=False, config=False, split=False)
    defaults = SyntheticSpec()
    sp.add_argument("--channels", type=int, default=defaults.n_channels)
    sp.add_argument("--times", type=int, default=defaults.n_times)
    sp.add_argument("--classes", type=int, default=defaults.n_classes)
    sp.add_argument("--subjects", type=int, default=defaults.n_subjects)
    sp.add_argument("--trials-per-pair", type=int, default=defaults.trials_per_pair)
    sp.add_argument("--noise-std", type=float, default=defaults.noise_std)
    sp.add_argument("--task-gain", type=float, default=defaults.task_gain)
    sp.add_argument("--subject-gain", type=float, default=defaults.subject_gain)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train, test on held-out subjects, write checkpoint/log/manifest")
    common(sp)
    sp.add_argument("--from-manifest", help="re-run the experiment recorded in a manifest")
    sp.add_argument("--export-masks", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on chosen subjects")
    common(sp, config=False, split=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--subjects-test", type=_ints, default=None)
    sp.add_argument("--export-masks", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run the ablation rows and write a comparison table")
    common(sp)
    sp.add_argument("--rows", help="comma-separated subset of: " + ", ".join(ABLATION_ROWS))
    sp.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    sp.add_argument("--support", type=int, default=20, help="few-shot support trials per test subject")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the autodiff engine and losses")
    sp.add_argument("--out", default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--probes", type=int, default=100)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("adapt", help="few-shot personalization on one subject")
    common(sp, config=False, split=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--subject", type=int, required=True)
    sp.add_argument("--support", type=int, default=20)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.set_defaults(func=cmd_adapt)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command in ("train", "ablate") and not getattr(args, "from_manifest", None):
            if not args.dataset:
                raise UsageError(f"{args.command} needs --dataset")
            if not args.subjects_test:
                raise UsageError(f"{args.command} needs --subjects-test")
        if args.command in ("eval", "adapt") and not args.dataset:
            raise UsageError(f"{args.command} needs --dataset")
        return args.func(args)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 2
    except (PtsmError, OSError, ValueError, KeyError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
