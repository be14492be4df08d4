"""Hyperparameter grid enumeration and exhaustive search over it.

The canonical grid is depths (2,3,4,5) x widths (16,32,64,128,256,512) per
stage: 24 specs for baseline and simple furcated models, 24 x 24 = 576 for
extended ones (the two stage-1 sub-networks share hyperparameters; stage 2
varies independently). The winner is the completed trial with the lowest
selection criterion — a chosen task's validation RMSE in per-task mode, the
reweighted multi-task validation loss in joint mode — with ties broken by
parameter count, then spec order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from itertools import product

from .arch import GRID_DEPTHS, GRID_WIDTHS, ARCH_CLASSES, NetworkSpec, spec_param_count
from .data import DescriptorDataset, SplitPlan
from .errors import FurcnetError, InvalidSpecError
from .train import (
    CVResult,
    TrainConfig,
    cross_validate,
    default_task_weights,
    parallel_map,
)

logger = logging.getLogger(__name__)

SEARCH_MODES = ("per_task", "joint_all_tasks")


@dataclass(frozen=True)
class GridSpec:
    """The search space for one architecture class."""

    arch_class: str
    search_mode: str = "joint_all_tasks"
    task_index: int | None = None  # which label column, per_task mode only
    depth_choices: tuple[int, ...] = GRID_DEPTHS
    width_choices: tuple[int, ...] = GRID_WIDTHS
    n_tasks: int | None = None  # default: 1 for per_task, 3 for joint
    hidden_dropout: float = 0.5
    off_grid: bool = False

    def validate(self):
        if self.arch_class not in ARCH_CLASSES:
            raise InvalidSpecError(f"unknown arch_class {self.arch_class!r}")
        if self.search_mode not in SEARCH_MODES:
            raise InvalidSpecError(f"unknown search_mode {self.search_mode!r}")
        if self.search_mode == "per_task" and self.task_index is None:
            raise InvalidSpecError("per_task search requires task_index")
        if not self.off_grid:
            if tuple(sorted(self.depth_choices)) != GRID_DEPTHS or tuple(
                sorted(self.width_choices)
            ) != GRID_WIDTHS:
                raise InvalidSpecError(
                    "depth/width choices differ from the canonical grid; "
                    "set off_grid to search a custom grid"
                )
        if not self.depth_choices or not self.width_choices:
            raise InvalidSpecError("depth/width choice sets must be non-empty")

    def effective_n_tasks(self) -> int:
        if self.n_tasks is not None:
            return self.n_tasks
        return 1 if self.search_mode == "per_task" else 3


def enumerate_grid(grid: GridSpec) -> list[NetworkSpec]:
    """All specs of the grid in deterministic (d1, w1, d2, w2) order."""
    grid.validate()
    depths = tuple(sorted(grid.depth_choices))
    widths = tuple(sorted(grid.width_choices))
    n_tasks = grid.effective_n_tasks()
    common = dict(
        n_tasks=n_tasks, hidden_dropout=grid.hidden_dropout, off_grid=grid.off_grid
    )
    specs = []
    if grid.arch_class == "extended_furcated":
        for d1, w1, d2, w2 in product(depths, widths, depths, widths):
            specs.append(
                NetworkSpec(grid.arch_class, d1, w1, stage2_depth=d2, stage2_width=w2,
                            **common)
            )
    else:
        for d1, w1 in product(depths, widths):
            specs.append(NetworkSpec(grid.arch_class, d1, w1, **common))
    return specs


@dataclass
class TrialResult:
    """One grid point's outcome; `error` is set when the trial failed."""

    spec: NetworkSpec
    criterion: float | None
    cv: CVResult | None
    error: str | None = None

    @property
    def completed(self) -> bool:
        return self.error is None


@dataclass
class SearchResult:
    grid: GridSpec
    trials: list[TrialResult]  # completed trials, ranked best first
    failures: list[TrialResult]
    winner: TrialResult | None


def _run_trial(spec, dataset, split, config) -> TrialResult:
    try:
        cv = cross_validate(spec, dataset, split, config)
    except FurcnetError as exc:
        logger.warning("trial %s/%s failed: %s", spec.stage1_label(), spec.stage2_label(), exc)
        return TrialResult(spec=spec, criterion=None, cv=None, error=str(exc))
    return TrialResult(spec=spec, criterion=None, cv=cv)


def _trial_worker(args):
    return _run_trial(*args)


def grid_search(
    grid: GridSpec,
    dataset: DescriptorDataset,
    split: SplitPlan,
    config: TrainConfig,
    budget: int | None = None,
    jobs: int = 1,
) -> SearchResult:
    """Cross-validate every spec in the grid and rank by validation criterion.

    `budget` truncates the search to the first N specs in enumeration order,
    which keeps truncated searches reproducible. Failed trials are recorded
    with their reason and excluded from the ranking. In per_task mode the
    dataset is reduced to the grid's task column and single-task models are
    trained on it; in joint mode multi-task models train on all columns under
    the config's (reweighted) task weights.
    """
    specs = enumerate_grid(grid)
    if budget is not None:
        if not 1 <= budget <= len(specs):
            raise ValueError(f"budget must be in [1, {len(specs)}], got {budget}")
        specs = specs[:budget]

    if grid.search_mode == "per_task":
        dataset = dataset.select_task(grid.task_index)
    if len(config.task_weights) != dataset.n_tasks:
        config = replace(config, task_weights=default_task_weights(dataset.n_tasks),
                         overweight_task=None)

    args = [(spec, dataset, split, config) for spec in specs]
    results = parallel_map(_trial_worker, args, jobs)

    completed, failures = [], []
    for trial in results:
        if not trial.completed:
            failures.append(trial)
            continue
        if grid.search_mode == "per_task":
            trial.criterion = float(trial.cv.val_rmse[0])
        else:
            trial.criterion = trial.cv.val_loss
        completed.append(trial)

    completed.sort(
        key=lambda t: (t.criterion, spec_param_count(t.spec), t.spec.order_key())
    )
    winner = completed[0] if completed else None
    return SearchResult(grid=grid, trials=completed, failures=failures, winner=winner)
