"""Furcated feedforward networks for multi-task regression.

The library models two-component entities (here: ion pairs described by 94
descriptors each, plus temperature/pressure state variables) with three
architecture classes — a plain MLP baseline and two furcated designs with
per-component sub-networks — and ships the full training protocol around
them: 75/25 splitting, 5-fold cross-validation, Adam, early stopping,
reweighted/overweighted multi-task losses, grid search, and RMSE reporting.
"""

__version__ = "0.1.0"

from .arch import (
    ARCH_CLASSES,
    GRID_DEPTHS,
    GRID_WIDTHS,
    NetworkSpec,
    build,
    deserialize,
    format_stage,
    load_model,
    param_count,
    parse_stage,
    save_model,
    serialize,
    spec_param_count,
)
from .data import (
    DescriptorDataset,
    ScalerState,
    SplitPlan,
    SynthCoefficients,
    load_csv,
    log_labels,
    make_split,
    standardize,
    synth_generate,
    unlog_labels,
    write_csv,
)
from .nn_core import (
    ActivationTrace,
    DenseLayer,
    GradientSet,
    Model,
    backward,
    forward,
    grad_check,
    init_params,
    predict,
)
from .report import RunReport, emit_report, percent_improvement, rmse
from .search import GridSpec, SearchResult, TrialResult, enumerate_grid, grid_search
from .train import (
    CVResult,
    FitResult,
    OptimizerState,
    TrainConfig,
    adam_step,
    cross_validate,
    default_task_weights,
    fit,
    init_optimizer_state,
    mse,
    multitask_loss,
)
