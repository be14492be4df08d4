"""Losses, the Adam optimizer, the epoch loop, and cross-validated fitting.

Training follows a fixed protocol: shuffled mini-batches of 30, Adam with
lr=1e-3 / beta1=0.9 / beta2=0.999, up to 500 epochs, and early stopping once
the validation loss has gone `patience` (default 50) epochs without improving;
the parameters from the best validation epoch are what a fit returns. The
multi-task loss is a weighted sum of per-task mean squared errors; the default
multi-task weights are 5:30:1 and overweighting multiplies one task's weight
by 100.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, replace

import numpy as np

from .arch import NetworkSpec, build
from .data import DescriptorDataset, SplitPlan, standardize
from .errors import EmptyDatasetError, InvariantError, NumericError, ShapeError
from .nn_core import Model, backward, forward, predict
from .report import rmse

SINGLE_TASK_WEIGHTS = (1.0,)
MULTI_TASK_WEIGHTS = (5.0, 30.0, 1.0)  # heat capacity : density : viscosity
DEFAULT_OVERWEIGHT_FACTOR = 100.0

# a validation loss must drop by more than this to count as an improvement
MIN_IMPROVEMENT = 1e-6


def default_task_weights(n_tasks: int) -> tuple[float, ...]:
    if n_tasks == 1:
        return SINGLE_TASK_WEIGHTS
    if n_tasks == 3:
        return MULTI_TASK_WEIGHTS
    return (1.0,) * n_tasks


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings, task weights, and protocol knobs for one fit."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 500
    batch_size: int = 30
    patience: int = 50
    task_weights: tuple[float, ...] = SINGLE_TASK_WEIGHTS
    overweight_task: int | None = None
    overweight_factor: float = DEFAULT_OVERWEIGHT_FACTOR
    seed: int = 0

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ValueError("beta1/beta2 must be in [0,1) and epsilon positive")
        if any(w <= 0 for w in self.task_weights):
            raise ValueError("task weights must all be positive")
        if not 0 < self.patience < self.max_epochs:
            raise ValueError("patience must be positive and smaller than max_epochs")
        if self.overweight_task is not None:
            if not 0 <= self.overweight_task < len(self.task_weights):
                raise IndexError(
                    f"overweight task {self.overweight_task} out of range for "
                    f"{len(self.task_weights)} tasks"
                )
            if self.overweight_factor <= 0:
                raise ValueError("overweight_factor must be positive")

    def effective_weights(self) -> np.ndarray:
        """Task weights with the overweight factor folded in."""
        w = np.asarray(self.task_weights, dtype=np.float64)
        if self.overweight_task is not None:
            w = w.copy()
            w[self.overweight_task] *= self.overweight_factor
        return w


def mse(pred, target, task: int) -> float:
    """Mean over the batch of squared error for one task column."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} must be equal 2-D")
    if not 0 <= task < pred.shape[1]:
        raise IndexError(f"task index {task} out of range for {pred.shape[1]} tasks")
    return float(np.mean((pred[:, task] - target[:, task]) ** 2))


def multitask_loss(pred, target, weights, overweight: tuple[int, float] | None = None) -> float:
    """Weighted sum of per-task MSEs: sum_t w_t * mse_t, no normalization.

    `overweight=(task, factor)` multiplies that task's weight by the factor,
    e.g. weights 5:30:1 with task 0 overweighted by 100 become 500:30:1.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} must be equal 2-D")
    if w.shape != (pred.shape[1],):
        raise ShapeError(f"{w.shape[0]} weights for {pred.shape[1]} tasks")
    if np.any(w <= 0):
        raise ValueError("task weights must all be positive")
    if overweight is not None:
        task, factor = overweight
        if not 0 <= task < w.shape[0]:
            raise IndexError(f"overweight task {task} out of range for {w.shape[0]} tasks")
        w = w.copy()
        w[task] = factor * w[task]
    total = 0.0
    for t in range(pred.shape[1]):
        total += w[t] * mse(pred, target, t)
    return total


@dataclass
class OptimizerState:
    """Adam moment estimates, keyed like Model.param_items()."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_optimizer_state(model: Model) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(p) for k, p in model.param_items()},
        v={k: np.zeros_like(p) for k, p in model.param_items()},
    )


def adam_step(model: Model, grads, state: OptimizerState, config: TrainConfig):
    """One Adam update with bias correction; mutates model and state in place.

        m <- b1*m + (1-b1)*g        m_hat = m / (1 - b1^t)
        v <- b2*v + (1-b2)*g^2      v_hat = v / (1 - b2^t)
        param <- param - lr * m_hat / (sqrt(v_hat) + eps)

    Returns (model, state) for call-chaining.
    """
    state.t += 1
    bc1 = 1.0 - config.beta1 ** state.t
    bc2 = 1.0 - config.beta2 ** state.t
    for key, param in model.param_items():
        if key not in grads.data:
            raise InvariantError(f"gradient set is missing parameter {key}")
        g = grads.data[key]
        if g.shape != param.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {param.shape} at {key}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {key}")
        m, v = state.m[key], state.v[key]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        param -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
    return model, state


@dataclass
class FitResult:
    """Outcome of one fit: best-epoch model snapshot plus the loss history."""

    model: Model
    best_epoch: int  # 1-based epoch whose snapshot `model` holds
    best_val_loss: float
    train_history: list[float]
    val_history: list[float]
    stopped_early: bool


def _dataset_loss(model: Model, features, labels, weights) -> float:
    """Full-dataset loss in eval mode (dropout off)."""
    return multitask_loss(predict(model, features), labels, weights)


def _snapshot(model: Model):
    return [(k, p.copy()) for k, p in model.param_items()]


def _restore(model: Model, snapshot):
    for (_, dst), (_, src) in zip(model.param_items(), snapshot):
        np.copyto(dst, src)


def _check_xy(name, xy, n_tasks):
    x, y = xy
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"{name} features/labels must be 2-D with matching rows")
    if x.shape[0] == 0:
        raise EmptyDatasetError(f"{name} set is empty")
    if y.shape[1] != n_tasks:
        raise ShapeError(f"{name} labels have {y.shape[1]} tasks, model expects {n_tasks}")
    return x, y


def fit(model: Model, train_data, val_data, config: TrainConfig) -> FitResult:
    """Mini-batch training with early stopping on the validation loss.

    `train_data` and `val_data` are (features, labels) pairs in transformed
    space. Each epoch shuffles the training rows with the config's seeded
    generator and walks them in batches of `batch_size` (the final short batch
    is used, not dropped). After every epoch the full validation loss is
    computed in eval mode; training stops once it has failed to improve by
    more than 1e-6 for `patience` consecutive epochs. The returned model is
    the snapshot from the best epoch. The input model is left untouched.
    """
    config.validate()
    n_tasks = model.output_dim
    if len(config.task_weights) != n_tasks:
        raise ShapeError(
            f"{len(config.task_weights)} task weights for a {n_tasks}-task model"
        )
    x_train, y_train = _check_xy("train", train_data, n_tasks)
    x_val, y_val = _check_xy("val", val_data, n_tasks)

    weights = config.effective_weights()
    work = model.copy()
    state = init_optimizer_state(work)
    rng = np.random.default_rng(config.seed & 0xFFFFFFFFFFFFFFFF)

    best_val = np.inf
    best_epoch = 0
    best_params = _snapshot(work)
    epochs_without_improvement = 0
    train_history: list[float] = []
    val_history: list[float] = []
    stopped_early = False

    n = x_train.shape[0]
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            out, trace = forward(work, xb, mode="train", rng=rng)
            diff = out - yb
            batch_loss = float(np.sum(weights * np.mean(diff * diff, axis=0)))
            if not np.isfinite(batch_loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {bi}")
            grad_out = (2.0 / xb.shape[0]) * weights * diff
            grads = backward(work, trace, grad_out)
            try:
                adam_step(work, grads, state, config)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {bi}: {exc}") from exc

        train_loss = _dataset_loss(work, x_train, y_train, weights)
        val_loss = _dataset_loss(work, x_val, y_val, weights)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise NumericError(f"non-finite epoch loss at epoch {epoch}")
        train_history.append(train_loss)
        val_history.append(val_loss)

        if val_loss < best_val - MIN_IMPROVEMENT:
            best_val = val_loss
            best_epoch = epoch
            best_params = _snapshot(work)
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= config.patience:
                stopped_early = True
                break

    # epoch 1 always improves on +inf, so best_epoch >= 1 here
    best_model = model.copy()
    _restore(best_model, best_params)
    return FitResult(
        model=best_model,
        best_epoch=best_epoch,
        best_val_loss=float(best_val),
        train_history=train_history,
        val_history=val_history,
        stopped_early=stopped_early,
    )


def fold_seed(base_seed: int, fold: int, stream: int) -> int:
    """Deterministic per-fold seed derivation (stream 0: init, 1: training)."""
    entropy = [base_seed & 0xFFFFFFFFFFFFFFFF, fold, stream]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass
class FoldOutcome:
    fold: int
    fit_result: FitResult
    val_rmse: np.ndarray  # (T,)
    test_rmse: np.ndarray  # (T,)
    val_loss: float


@dataclass
class CVResult:
    """Aggregated 5-fold cross-validation outcome for one spec."""

    spec: NetworkSpec
    config: TrainConfig
    folds: list[FoldOutcome]
    val_rmse: np.ndarray  # (T,) mean over folds
    test_rmse: np.ndarray  # (T,) mean over fold models evaluated on the test set
    val_loss: float  # mean over folds of the best-epoch weighted val loss

    @property
    def fold_results(self) -> list[FitResult]:
        return [f.fit_result for f in self.folds]


def _task_rmse(model: Model, features, labels) -> np.ndarray:
    pred = predict(model, features)
    return np.array([rmse(pred[:, t], labels[:, t]) for t in range(labels.shape[1])])


def _run_fold(args) -> FoldOutcome:
    spec, dataset, split, config, k = args
    train_ds, scaler = standardize(dataset.subset(split.train_indices(k)))
    val_ds, _ = standardize(dataset.subset(split.val_indices(k)), scaler)
    test_ds, _ = standardize(dataset.subset(split.test_indices), scaler)

    model = build(spec, seed=fold_seed(config.seed, k, 0))
    fold_config = replace(config, seed=fold_seed(config.seed, k, 1))
    try:
        result = fit(
            model,
            (train_ds.features(), train_ds.labels),
            (val_ds.features(), val_ds.labels),
            fold_config,
        )
    except NumericError as exc:
        raise NumericError(f"fold {k}: {exc}") from exc
    return FoldOutcome(
        fold=k,
        fit_result=result,
        val_rmse=_task_rmse(result.model, val_ds.features(), val_ds.labels),
        test_rmse=_task_rmse(result.model, test_ds.features(), test_ds.labels),
        val_loss=result.best_val_loss,
    )


def parallel_map(fn, items, jobs: int = 1):
    """Map preserving order; uses a process pool when jobs > 1.

    Work units must be independent and deterministic, so results are identical
    at any job count.
    """
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cross_validate(
    spec: NetworkSpec,
    dataset: DescriptorDataset,
    split: SplitPlan,
    config: TrainConfig,
    jobs: int = 1,
) -> CVResult:
    """Train one model per fold and aggregate validation/test RMSE.

    For fold k the model trains on the other four folds; the feature scaler is
    fitted on those training rows only and applied to the fold's validation
    rows and to the held-out test rows. Per-fold init and shuffle seeds are
    derived from config.seed, so the result is independent of `jobs` and of
    execution order. Validation RMSE is the mean over folds; test RMSE is the
    mean over the five fold models evaluated on the test set.
    """
    if split.n_rows != dataset.n_rows:
        raise InvariantError(
            f"split plan was built for {split.n_rows} rows, dataset has {dataset.n_rows}"
        )
    if dataset.features_standardized:
        raise InvariantError(
            "cross_validate standardizes per fold; pass a dataset with raw features"
        )
    if len(config.task_weights) != dataset.n_tasks:
        raise ShapeError(
            f"{len(config.task_weights)} task weights for {dataset.n_tasks} task(s)"
        )
    args = [(spec, dataset, split, config, k) for k in range(len(split.folds))]
    outcomes = parallel_map(_run_fold, args, jobs)
    val = np.mean([o.val_rmse for o in outcomes], axis=0)
    test = np.mean([o.test_rmse for o in outcomes], axis=0)
    loss = float(np.mean([o.val_loss for o in outcomes]))
    return CVResult(
        spec=spec, config=config, folds=outcomes,
        val_rmse=val, test_rmse=test, val_loss=loss,
    )
