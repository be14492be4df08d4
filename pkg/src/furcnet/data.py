"""Dataset ingestion, scaling, label transforms, splits, and synthetic data.

CSV schema (UTF-8, '.' decimal, header required):

    c_000..c_093, a_000..a_093, temperature_K, pressure_kPa, cpt, density, viscosity

The 94 ``c_*``/``a_*`` columns are per-component descriptor features; the two
state columns are experiment conditions; the trailing columns are regression
labels (a file may carry any subset of the three, in this order). Rows with
missing or non-finite entries are dropped with a logged count; values outside
the documented plausibility ranges are warned about, never rejected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .errors import (
    DataError,
    EmptyDatasetError,
    InvariantError,
    SchemaError,
    ShapeError,
    SplitError,
)
from .nn_core import as_generator

logger = logging.getLogger(__name__)

N_COMPONENT_FEATURES = 94
N_STATE_VARS = 2

CATION_COLUMNS = tuple(f"c_{i:03d}" for i in range(N_COMPONENT_FEATURES))
ANION_COLUMNS = tuple(f"a_{i:03d}" for i in range(N_COMPONENT_FEATURES))
STATE_COLUMNS = ("temperature_K", "pressure_kPa")
FEATURE_COLUMNS = CATION_COLUMNS + ANION_COLUMNS + STATE_COLUMNS
LABEL_COLUMNS = ("cpt", "density", "viscosity")

# Documented ranges of the curated source data; used for plausibility warnings.
PLAUSIBLE_RANGES = {
    "temperature_K": (278.15, 373.15),
    "pressure_kPa": (100.0, 20000.0),
    "cpt": (231.8, 1764.0),
    "density": (847.5, 1557.1),
    "viscosity": (0.00316, 10.2),
}

TEST_FRACTION = 0.25
N_FOLDS = 5


@dataclass
class DescriptorDataset:
    """Rows of (cation features, anion features, state variables, labels)."""

    cation: np.ndarray  # (N, 94)
    anion: np.ndarray  # (N, 94)
    state: np.ndarray  # (N, 2)
    labels: np.ndarray  # (N, T)
    label_names: tuple[str, ...]
    features_standardized: bool = False
    labels_logged: bool = False

    def __post_init__(self):
        self.cation = np.atleast_2d(np.asarray(self.cation, dtype=np.float64))
        self.anion = np.atleast_2d(np.asarray(self.anion, dtype=np.float64))
        self.state = np.atleast_2d(np.asarray(self.state, dtype=np.float64))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        n = self.cation.shape[0]
        if not (self.anion.shape[0] == self.state.shape[0] == self.labels.shape[0] == n):
            raise ShapeError("cation/anion/state/labels row counts disagree")
        if self.labels.shape[1] != len(self.label_names):
            raise ShapeError(
                f"{self.labels.shape[1]} label columns but "
                f"{len(self.label_names)} label names"
            )
        for name, block in (("cation", self.cation), ("anion", self.anion),
                            ("state", self.state), ("labels", self.labels)):
            if not np.all(np.isfinite(block)):
                raise DataError(f"non-finite values in {name} block")

    @property
    def n_rows(self) -> int:
        return self.cation.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.labels.shape[1]

    @property
    def transform_state(self) -> str:
        if self.features_standardized and self.labels_logged:
            return "standardized+logged"
        if not self.features_standardized and not self.labels_logged:
            return "raw"
        return "standardized" if self.features_standardized else "logged"

    def features(self) -> np.ndarray:
        """All model inputs as one (N, 190) matrix: cation | anion | state."""
        return np.hstack([self.cation, self.anion, self.state])

    def subset(self, indices) -> "DescriptorDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return replace(
            self,
            cation=self.cation[idx],
            anion=self.anion[idx],
            state=self.state[idx],
            labels=self.labels[idx],
        )

    def select_task(self, task: int) -> "DescriptorDataset":
        if not 0 <= task < self.n_tasks:
            raise IndexError(f"task index {task} out of range for {self.n_tasks} tasks")
        return replace(
            self,
            labels=self.labels[:, task : task + 1].copy(),
            label_names=(self.label_names[task],),
        )


@dataclass
class ScalerState:
    """Per-column mean and population std, fitted on training rows only."""

    mean: np.ndarray
    std: np.ndarray  # population std; 0 recorded for constant columns
    constant_columns: np.ndarray  # indices of columns with zero variance

    @property
    def n_columns(self) -> int:
        return self.mean.shape[0]

    def _safe_std(self) -> np.ndarray:
        safe = self.std.copy()
        safe[self.constant_columns] = 1.0
        return safe

    def apply(self, features: np.ndarray) -> np.ndarray:
        if features.shape[1] != self.n_columns:
            raise ShapeError(
                f"scaler fitted on {self.n_columns} columns, got {features.shape[1]}"
            )
        out = (features - self.mean) / self._safe_std()
        out[:, self.constant_columns] = 0.0
        return out

    def invert(self, features: np.ndarray) -> np.ndarray:
        if features.shape[1] != self.n_columns:
            raise ShapeError(
                f"scaler fitted on {self.n_columns} columns, got {features.shape[1]}"
            )
        return features * self._safe_std() + self.mean


def fit_scaler(features: np.ndarray) -> ScalerState:
    mean = features.mean(axis=0)
    std = features.std(axis=0)  # ddof=0: population std
    constant = np.flatnonzero(std == 0.0)
    return ScalerState(mean, std, constant)


def standardize(dataset: DescriptorDataset, scaler: ScalerState | None = None):
    """Zero-mean/unit-variance scaling of the 190 input columns.

    With no scaler, fits mean and population std on the given rows and applies
    them; with a scaler, applies it unchanged (how validation/test rows must be
    transformed). Constant columns map to 0 and are recorded. Standardizing an
    already standardized dataset raises, which is the pipeline's guard against
    refitting on validation or test rows.

    Returns (standardized dataset, scaler used).
    """
    if dataset.features_standardized:
        raise InvariantError(
            "dataset features are already standardized; refusing to fit or apply again"
        )
    features = dataset.features()
    if scaler is None:
        scaler = fit_scaler(features)
    scaled = scaler.apply(features)
    nc, na = dataset.cation.shape[1], dataset.anion.shape[1]
    out = replace(
        dataset,
        cation=scaled[:, :nc],
        anion=scaled[:, nc : nc + na],
        state=scaled[:, nc + na :],
        features_standardized=True,
    )
    return out, scaler


def log_labels(dataset: DescriptorDataset) -> DescriptorDataset:
    """Apply the natural log to every label; all labels must be positive."""
    if dataset.labels_logged:
        raise InvariantError("labels are already log-transformed")
    bad = np.argwhere(dataset.labels <= 0.0)
    if bad.size:
        row, task = bad[0]
        raise DataError(
            f"label {dataset.label_names[task]!r} at row {row} is "
            f"{dataset.labels[row, task]}; log transform requires positive values"
        )
    return replace(dataset, labels=np.log(dataset.labels), labels_logged=True)


def unlog_labels(dataset: DescriptorDataset) -> DescriptorDataset:
    if not dataset.labels_logged:
        raise InvariantError("labels are not log-transformed")
    return replace(dataset, labels=np.exp(dataset.labels), labels_logged=False)


@dataclass
class SplitPlan:
    """25% test split plus a 5-fold partition of the remaining 75%."""

    n_rows: int
    seed: int
    test_indices: np.ndarray
    folds: tuple[np.ndarray, ...]

    def trainval_indices(self) -> np.ndarray:
        return np.concatenate(self.folds)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.concatenate([f for k, f in enumerate(self.folds) if k != fold])

    def val_indices(self, fold: int) -> np.ndarray:
        return self.folds[fold]


def make_split(n_rows: int, seed: int) -> SplitPlan:
    """Deterministic test/fold assignment for a dataset of ``n_rows``.

    The test set gets round(N/4) rows (round-half-to-even); the remainder is
    split into 5 folds whose sizes differ by at most one.
    """
    if n_rows < 8:
        raise SplitError(f"need at least 8 rows to split, got {n_rows}")
    n_test = round(TEST_FRACTION * n_rows)
    rest = n_rows - n_test
    if rest < N_FOLDS:
        raise SplitError(f"{rest} train/val rows cannot form {N_FOLDS} non-empty folds")
    perm = as_generator(seed).permutation(n_rows)
    test = np.sort(perm[:n_test])
    folds = tuple(np.sort(f) for f in np.array_split(perm[n_test:], N_FOLDS))
    return SplitPlan(n_rows=n_rows, seed=seed, test_indices=test, folds=folds)


@dataclass
class SynthCoefficients:
    """Generator parameters of a synthetic dataset, kept for oracle checks.

    For each task t the raw label is
        alpha[t] * u + beta[t] * v + interaction_strength * u * v * s + noise
    where u/v are the projections of the cation/anion features onto
    cation_projection/anion_projection and s is state variable
    ``state_index``. ``shifts[t]`` was added to make labels positive.
    """

    seed: int
    interaction_strength: float
    noise_sd: float
    alpha: np.ndarray  # (T,)
    beta: np.ndarray  # (T,)
    shifts: np.ndarray  # (T,)
    cation_projection: np.ndarray  # (94,)
    anion_projection: np.ndarray  # (94,)
    state_index: int = 0


def synth_generate(
    n_rows: int,
    seed: int,
    interaction_strength: float = 0.0,
    noise_sd: float = 0.0,
):
    """Generate a synthetic dataset in the documented schema.

    Features are standard normal. Labels combine per-component linear terms
    with an optional state-modulated cation-anion interaction, plus Gaussian
    noise, shifted per task to be strictly positive (so the log transform is
    applicable). Returns (dataset, SynthCoefficients); fully deterministic
    given the arguments.
    """
    if n_rows < 1:
        raise ValueError(f"n_rows must be >= 1, got {n_rows}")
    if interaction_strength < 0:
        raise ValueError("interaction_strength must be >= 0")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")

    rng = as_generator(seed)
    cation = rng.standard_normal((n_rows, N_COMPONENT_FEATURES))
    anion = rng.standard_normal((n_rows, N_COMPONENT_FEATURES))
    state = rng.standard_normal((n_rows, N_STATE_VARS))

    # unit-variance projections of the component features
    p = rng.standard_normal(N_COMPONENT_FEATURES) / np.sqrt(N_COMPONENT_FEATURES)
    q = rng.standard_normal(N_COMPONENT_FEATURES) / np.sqrt(N_COMPONENT_FEATURES)
    n_tasks = len(LABEL_COLUMNS)
    alpha = rng.uniform(0.5, 1.5, size=n_tasks)
    beta = rng.uniform(0.5, 1.5, size=n_tasks)

    u = cation @ p
    v = anion @ q
    s = state[:, 0]
    labels = np.empty((n_rows, n_tasks))
    shifts = np.empty(n_tasks)
    for t in range(n_tasks):
        raw = alpha[t] * u + beta[t] * v + interaction_strength * u * v * s
        if noise_sd > 0:
            raw = raw + rng.normal(0.0, noise_sd, size=n_rows)
        shifts[t] = max(0.0, -float(raw.min())) + 1.0
        labels[:, t] = raw + shifts[t]

    dataset = DescriptorDataset(cation, anion, state, labels, LABEL_COLUMNS)
    coeffs = SynthCoefficients(
        seed=seed,
        interaction_strength=interaction_strength,
        noise_sd=noise_sd,
        alpha=alpha,
        beta=beta,
        shifts=shifts,
        cation_projection=p,
        anion_projection=q,
    )
    return dataset, coeffs


def to_dataframe(dataset: DescriptorDataset) -> pd.DataFrame:
    data = {}
    for i, col in enumerate(CATION_COLUMNS):
        data[col] = dataset.cation[:, i]
    for i, col in enumerate(ANION_COLUMNS):
        data[col] = dataset.anion[:, i]
    for i, col in enumerate(STATE_COLUMNS):
        data[col] = dataset.state[:, i]
    for i, col in enumerate(dataset.label_names):
        data[col] = dataset.labels[:, i]
    return pd.DataFrame(data)


def write_csv(dataset: DescriptorDataset, path) -> None:
    """Write a dataset in the documented CSV schema (deterministic bytes)."""
    to_dataframe(dataset).to_csv(path, index=False, lineterminator="\n")


def _warn_out_of_range(frame: pd.DataFrame):
    for col, (lo, hi) in PLAUSIBLE_RANGES.items():
        if col not in frame.columns:
            continue
        values = frame[col].to_numpy()
        outside = np.count_nonzero((values < lo) | (values > hi))
        if outside:
            logger.warning(
                "%d of %d values in column %r fall outside the documented range "
                "[%g, %g]", outside, len(values), col, lo, hi,
            )


def load_csv(path, expected_tasks: int | None = None) -> DescriptorDataset:
    """Load a descriptor CSV, dropping unusable rows and warning on outliers.

    Columns are matched by name. The 190 feature columns are required; label
    columns are whichever of cpt/density/viscosity are present (in that
    order). Rows containing missing or non-finite values are dropped with a
    logged count.
    """
    frame = pd.read_csv(path)
    for col in FEATURE_COLUMNS:
        if col not in frame.columns:
            raise SchemaError(f"missing required column {col!r}")
    label_cols = [c for c in LABEL_COLUMNS if c in frame.columns]
    if not label_cols:
        raise SchemaError(f"no label column found; expected one of {LABEL_COLUMNS}")
    if expected_tasks is not None and len(label_cols) != expected_tasks:
        raise SchemaError(
            f"expected {expected_tasks} label column(s), found {len(label_cols)}: "
            f"{label_cols}"
        )

    used = list(FEATURE_COLUMNS) + label_cols
    numeric = frame[used].apply(pd.to_numeric, errors="coerce")
    values = numeric.to_numpy(dtype=np.float64)
    keep = np.all(np.isfinite(values), axis=1)
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        logger.warning("dropped %d row(s) with missing or non-finite values", dropped)
    values = values[keep]
    if values.shape[0] == 0:
        raise EmptyDatasetError(f"no usable rows in {path}")

    _warn_out_of_range(numeric[keep])

    nc = len(CATION_COLUMNS)
    na = len(ANION_COLUMNS)
    ns = len(STATE_COLUMNS)
    return DescriptorDataset(
        cation=values[:, :nc],
        anion=values[:, nc : nc + na],
        state=values[:, nc + na : nc + na + ns],
        labels=values[:, nc + na + ns :],
        label_names=tuple(label_cols),
    )
