"""Command-line surface: synth, train, grid, gradcheck.

Every command writes a JSON manifest next to its outputs with the fully
resolved configuration, SHA-256 hashes of its inputs, the seed, and the
artifact paths, so a run can be reproduced from the manifest alone.

Exit codes: 0 success, 2 usage error, 3 numeric/training failure, 4 I/O or
input-file problem. `gradcheck` exits 1 when the check itself fails.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .arch import NetworkSpec, build, format_stage, parse_stage, save_model
from .data import (
    LABEL_COLUMNS,
    load_csv,
    log_labels,
    make_split,
    synth_generate,
    write_csv,
)
from .errors import FurcnetError, InvalidSpecError, ModelFormatError, NumericError
from .nn_core import grad_check
from .report import RunReport, emit_report
from .search import GridSpec, grid_search
from .train import TrainConfig, cross_validate, default_task_weights

logger = logging.getLogger(__name__)

GRADCHECK_THRESHOLD = 1e-4
SEED_ENV_VAR = "FURCNET_SEED"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class UsageError(Exception):
    """Inconsistent or invalid command-line arguments."""


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from None
    return 0


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _timestamp() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_manifest(path, command: str, resolved: dict, inputs, artifacts, seed: int):
    manifest = {
        "tool": "furcnet",
        "version": __version__,
        "command": command,
        "seed": seed,
        "resolved_config": resolved,
        "input_hashes": {str(p): _sha256(p) for p in inputs},
        "artifacts": [str(p) for p in artifacts],
        "created_at": _timestamp(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _parse_weights(text: str, n_tasks: int) -> tuple[float, ...]:
    parts = text.replace(":", ",").split(",")
    try:
        weights = tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"cannot parse task weights {text!r}") from None
    if len(weights) != n_tasks:
        raise UsageError(f"{len(weights)} weights given for {n_tasks} task(s)")
    if any(w <= 0 for w in weights):
        raise UsageError("task weights must be positive")
    return weights


def _spec_from_args(args, arch: str, n_tasks: int) -> NetworkSpec:
    try:
        if arch == "extended_furcated":
            if args.stage2 is None:
                raise UsageError("--arch extended requires --stage2")
            d2, w2 = parse_stage(args.stage2)
        else:
            if args.stage2 is not None:
                raise UsageError(f"--stage2 is invalid for --arch {arch}")
            d2 = w2 = None
        d1, w1 = parse_stage(args.stage1)
        spec = NetworkSpec(
            arch_class=arch,
            stage1_depth=d1,
            stage1_width=w1,
            stage2_depth=d2,
            stage2_width=w2,
            n_tasks=n_tasks,
            hidden_dropout=args.dropout,
            off_grid=args.off_grid,
        )
        spec.validate()
    except InvalidSpecError as exc:  # flag-derived, so report as a usage problem
        raise UsageError(str(exc)) from None
    return spec


_ARCH_ALIASES = {
    "baseline": "baseline",
    "simple": "simple_furcated",
    "simple_furcated": "simple_furcated",
    "extended": "extended_furcated",
    "extended_furcated": "extended_furcated",
}


def _add_common_model_flags(p, stage_defaults=(None, None)):
    p.add_argument("--arch", default="extended", choices=sorted(_ARCH_ALIASES),
                   help="architecture class")
    p.add_argument("--stage1", default=stage_defaults[0], metavar="D(W)",
                   help='stage-1 depth/width, e.g. "2(64)"')
    p.add_argument("--stage2", default=stage_defaults[1], metavar="D(W)",
                   help='stage-2 depth/width (extended only), e.g. "2(128)"')
    p.add_argument("--dropout", type=float, default=0.5,
                   help="hidden-layer dropout rate (default 0.5)")
    p.add_argument("--off-grid", action="store_true", dest="off_grid",
                   help="allow depth/width values outside the canonical grid")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=500, help="max training epochs")
    p.add_argument("--batch-size", type=int, default=30)
    p.add_argument("--patience", type=int, default=50,
                   help="early-stopping patience in epochs")
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel workers; results are identical at any value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="furcnet",
        description="Furcated feedforward networks for multi-task regression "
                    "over two-component entities.",
        epilog="Exit codes: 0 ok, 2 usage, 3 numeric/training failure, 4 I/O.",
    )
    parser.add_argument("--version", action="version", version=f"furcnet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic descriptor CSV")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--interaction", type=float, default=0.0,
                   help="cation-anion interaction strength")
    p.add_argument("--noise", type=float, default=0.0, help="label noise std dev")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="cross-validated training on a descriptor CSV")
    p.add_argument("--data", required=True, help="descriptor CSV path")
    _add_common_model_flags(p, stage_defaults=("2(64)", None))
    p.add_argument("--tasks", type=int, default=1, choices=(1, 3))
    p.add_argument("--task", default=None,
                   help="label column for --tasks 1 when the file has several "
                        f"(one of {', '.join(LABEL_COLUMNS)})")
    p.add_argument("--weights", default=None, metavar="W:W:W",
                   help="task loss weights, e.g. 5:30:1 (default per task count)")
    p.add_argument("--overweight-task", default=None,
                   help="label name or index whose weight is multiplied")
    p.add_argument("--overweight-factor", type=float, default=100.0)
    p.add_argument("--no-log-labels", action="store_true",
                   help="train on raw labels instead of natural-log labels")
    _add_train_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-model", default=None,
                   help="path prefix for the five fold model files")
    p.add_argument("--out-report", default=None, help="report CSV path")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", default="extended", choices=sorted(_ARCH_ALIASES))
    p.add_argument("--mode", default="joint", choices=("per-task", "joint"))
    p.add_argument("--task", default=LABEL_COLUMNS[0],
                   help="label column for per-task mode")
    p.add_argument("--budget", type=int, default=None,
                   help="truncate the search to the first N specs")
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--no-log-labels", action="store_true")
    _add_train_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="results CSV path")
    p.set_defaults(handler=cmd_grid)

    p = sub.add_parser("gradcheck",
                       help="verify backprop against central finite differences")
    _add_common_model_flags(p, stage_defaults=("2(64)", "2(128)"))
    p.add_argument("--tasks", type=int, default=1, choices=(1, 3))
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def cmd_synth(args) -> int:
    if args.rows < 1:
        raise UsageError(f"--rows must be >= 1, got {args.rows}")
    seed = _resolve_seed(args.seed)
    dataset, coeffs = synth_generate(args.rows, seed, args.interaction, args.noise)
    write_csv(dataset, args.out)
    sidecar = args.out + ".coeffs.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "seed": coeffs.seed,
                "interaction_strength": coeffs.interaction_strength,
                "noise_sd": coeffs.noise_sd,
                "alpha": coeffs.alpha.tolist(),
                "beta": coeffs.beta.tolist(),
                "shifts": coeffs.shifts.tolist(),
                "state_index": coeffs.state_index,
                "cation_projection": coeffs.cation_projection.tolist(),
                "anion_projection": coeffs.anion_projection.tolist(),
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    resolved = {"rows": args.rows, "interaction": args.interaction, "noise": args.noise,
                "out": args.out}
    write_manifest(args.out + ".manifest.json", "synth", resolved, [],
                   [args.out, sidecar], seed)
    print(f"wrote {args.rows} rows to {args.out}")
    return EXIT_OK


def _resolve_task_index(token: str, label_names) -> int:
    if token in label_names:
        return label_names.index(token)
    try:
        idx = int(token)
    except ValueError:
        raise UsageError(
            f"unknown task {token!r}; expected an index or one of {list(label_names)}"
        ) from None
    if not 0 <= idx < len(label_names):
        raise UsageError(f"task index {idx} out of range for {len(label_names)} task(s)")
    return idx


def _load_for_training(args, expected_tasks):
    dataset = load_csv(args.data, expected_tasks=None)
    if expected_tasks == 1 and dataset.n_tasks > 1:
        task = args.task if args.task is not None else dataset.label_names[0]
        dataset = dataset.select_task(_resolve_task_index(task, list(dataset.label_names)))
    elif expected_tasks is not None and dataset.n_tasks != expected_tasks:
        raise UsageError(
            f"--tasks {expected_tasks} but {args.data} has {dataset.n_tasks} label column(s)"
        )
    if not args.no_log_labels:
        dataset = log_labels(dataset)
    return dataset


def cmd_train(args) -> int:
    seed = _resolve_seed(args.seed)
    arch = _ARCH_ALIASES[args.arch]
    spec = _spec_from_args(args, arch, n_tasks=args.tasks)

    dataset = _load_for_training(args, expected_tasks=args.tasks)
    weights = (
        _parse_weights(args.weights, args.tasks)
        if args.weights is not None
        else default_task_weights(args.tasks)
    )
    overweight_task = None
    if args.overweight_task is not None:
        overweight_task = _resolve_task_index(args.overweight_task,
                                              list(dataset.label_names))
    config = TrainConfig(
        learning_rate=args.learning_rate,
        max_epochs=args.epochs,
        batch_size=args.batch_size,
        patience=args.patience,
        task_weights=weights,
        overweight_task=overweight_task,
        overweight_factor=args.overweight_factor,
        seed=seed,
    )
    try:
        config.validate()
    except (ValueError, IndexError) as exc:
        raise UsageError(str(exc)) from None

    split = make_split(dataset.n_rows, seed)
    cv = cross_validate(spec, dataset, split, config, jobs=args.jobs)

    artifacts = []
    if args.out_model:
        for outcome in cv.folds:
            path = f"{args.out_model}.fold{outcome.fold}.furcmodel"
            save_model(outcome.fit_result.model, path)
            artifacts.append(path)

    label_space = "raw" if args.no_log_labels else "ln"
    reports = [
        RunReport(
            property_name=dataset.label_names[t],
            model_class=spec.arch_class,
            stage1=spec.stage1_label(),
            stage2=spec.stage2_label(),
            val_rmse=float(cv.val_rmse[t]),
            test_rmse=float(cv.test_rmse[t]),
            label_space=label_space,
            seed=seed,
            timestamp=_timestamp(),
        )
        for t in range(dataset.n_tasks)
    ]
    text, csv_text = emit_report(reports)
    print(text, end="")
    if args.out_report:
        with open(args.out_report, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
        artifacts.append(args.out_report)

    resolved = {
        "data": args.data,
        "arch": spec.arch_class,
        "stage1": spec.stage1_label(),
        "stage2": spec.stage2_label(),
        "tasks": args.tasks,
        "task_weights": list(weights),
        "overweight_task": overweight_task,
        "overweight_factor": args.overweight_factor,
        "effective_task_weights": config.effective_weights().tolist(),
        "log_labels": not args.no_log_labels,
        "dropout": args.dropout,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "patience": args.patience,
        "learning_rate": args.learning_rate,
        "jobs": args.jobs,
        "val_rmse": cv.val_rmse.tolist(),
        "test_rmse": cv.test_rmse.tolist(),
    }
    manifest_path = (args.out_report or args.out_model or args.data) + ".manifest.json"
    write_manifest(manifest_path, "train", resolved, [args.data], artifacts, seed)
    return EXIT_OK


def cmd_grid(args) -> int:
    seed = _resolve_seed(args.seed)
    arch = _ARCH_ALIASES[args.arch]
    mode = "per_task" if args.mode == "per-task" else "joint_all_tasks"
    dataset = load_csv(args.data, expected_tasks=None)
    if not args.no_log_labels:
        dataset = log_labels(dataset)

    task_index = None
    if mode == "per_task":
        task_index = _resolve_task_index(args.task, list(dataset.label_names))
    grid = GridSpec(
        arch_class=arch,
        search_mode=mode,
        task_index=task_index,
        hidden_dropout=args.dropout,
    )
    config = TrainConfig(
        learning_rate=args.learning_rate,
        max_epochs=args.epochs,
        batch_size=args.batch_size,
        patience=args.patience,
        task_weights=default_task_weights(dataset.n_tasks),
        seed=seed,
    )
    split = make_split(dataset.n_rows, seed)
    result = grid_search(grid, dataset, split, config, budget=args.budget, jobs=args.jobs)

    if result.winner is None:
        for failure in result.failures:
            logger.error("trial %s/%s failed: %s", failure.spec.stage1_label(),
                         failure.spec.stage2_label(), failure.error)
        print("no trial completed", file=sys.stderr)
        return EXIT_NUMERIC

    label_space = "raw" if args.no_log_labels else "ln"
    stamp = _timestamp()
    reports = []
    for trial in result.trials:
        names = (
            [dataset.label_names[task_index]] if mode == "per_task"
            else list(dataset.label_names)
        )
        for t, name in enumerate(names):
            reports.append(
                RunReport(
                    property_name=name,
                    model_class=trial.spec.arch_class,
                    stage1=trial.spec.stage1_label(),
                    stage2=trial.spec.stage2_label(),
                    val_rmse=float(trial.cv.val_rmse[t]),
                    test_rmse=float(trial.cv.test_rmse[t]),
                    label_space=label_space,
                    seed=seed,
                    timestamp=stamp,
                )
            )
    text, csv_text = emit_report(reports)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    print(text, end="")
    winner = result.winner
    print(f"winner: {winner.spec.arch_class} stage1 {winner.spec.stage1_label()} "
          f"stage2 {winner.spec.stage2_label()} criterion {winner.criterion:.6g}")
    if result.failures:
        print(f"{len(result.failures)} trial(s) failed:", file=sys.stderr)
        for failure in result.failures:
            print(f"  {failure.spec.stage1_label()}/{failure.spec.stage2_label()}: "
                  f"{failure.error}", file=sys.stderr)

    resolved = {
        "data": args.data,
        "arch": arch,
        "mode": mode,
        "task_index": task_index,
        "budget": args.budget,
        "dropout": args.dropout,
        "log_labels": not args.no_log_labels,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "patience": args.patience,
        "learning_rate": args.learning_rate,
        "jobs": args.jobs,
        "trials_completed": len(result.trials),
        "trials_failed": len(result.failures),
        "winner": {
            "arch_class": winner.spec.arch_class,
            "stage1": winner.spec.stage1_label(),
            "stage2": winner.spec.stage2_label(),
            "criterion": winner.criterion,
        },
    }
    write_manifest(args.out + ".manifest.json", "grid", resolved, [args.data],
                   [args.out], seed)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args.seed)
    arch = _ARCH_ALIASES[args.arch]
    spec = _spec_from_args(args, arch, n_tasks=args.tasks)
    model = build(spec, seed)
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    batch = rng.standard_normal((4, model.input_dim))
    targets = rng.standard_normal((4, model.output_dim))
    err = grad_check(model, batch, targets)
    print(f"max_relative_error {err:.6e}")
    if err < GRADCHECK_THRESHOLD:
        print(f"gradient check passed (threshold {GRADCHECK_THRESHOLD:g})")
        return EXIT_OK
    print(f"gradient check FAILED (threshold {GRADCHECK_THRESHOLD:g})", file=sys.stderr)
    return 1


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return exc.code if exc.code is not None else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ModelFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FurcnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
