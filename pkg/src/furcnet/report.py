"""RMSE, percent improvement, and tabular run reports.

Reports follow a fixed column order — Property, Model, Stage #1, Stage #2,
Val RMSE, Test RMSE, % Improvement — with hyperparameters in the d(w)
convention ("3(128)" is 3 layers of 128 neurons). Percent improvement is
computed against the baseline-class row for the same property, from test RMSE
by default. The plain-text table rounds for display; the CSV always carries
full-precision values.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError

TABLE_COLUMNS = (
    "Property", "Model", "Stage #1", "Stage #2", "Val RMSE", "Test RMSE", "% Improvement",
)
CSV_EXTRA_COLUMNS = ("label_space", "seed", "timestamp")

MODEL_DISPLAY = {
    "baseline": "Baseline",
    "simple_furcated": "Simple",
    "extended_furcated": "Extended",
}


def rmse(pred, target) -> float:
    """Root-mean-squared error between two equal-length vectors."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ShapeError(f"length mismatch: {pred.shape[0]} vs {target.shape[0]}")
    if pred.size == 0:
        raise ShapeError("rmse of empty vectors is undefined")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def percent_improvement(baseline_rmse: float, model_rmse: float) -> float:
    """100 * (baseline - model) / baseline; negative when the model is worse."""
    if baseline_rmse <= 0:
        raise ValueError(f"baseline RMSE must be positive, got {baseline_rmse}")
    return 100.0 * (baseline_rmse - model_rmse) / baseline_rmse


@dataclass(frozen=True)
class RunReport:
    """One report row: a model's metrics for one property."""

    property_name: str
    model_class: str  # arch class token, e.g. "extended_furcated"
    stage1: str  # d(w) string
    stage2: str  # d(w) string or "-"
    val_rmse: float
    test_rmse: float
    pct_improvement: float | None = None
    baseline_name: str | None = None
    label_space: str = "ln"  # "ln" when labels were log-transformed, else "raw"
    seed: int = 0
    timestamp: str = ""


def resolve_improvements(reports, use_val: bool = False):
    """Fill in % improvement against each property's baseline-class row.

    Rows that already carry an improvement keep it; rows without a matching
    baseline row stay blank. Comparison uses test RMSE unless `use_val`.
    """
    baselines = {
        r.property_name: r for r in reports if r.model_class == "baseline"
    }
    resolved = []
    for r in reports:
        base = baselines.get(r.property_name)
        if r.pct_improvement is not None or base is None or base is r:
            resolved.append(r)
            continue
        b = base.val_rmse if use_val else base.test_rmse
        m = r.val_rmse if use_val else r.test_rmse
        resolved.append(
            replace(r, pct_improvement=percent_improvement(b, m),
                    baseline_name=MODEL_DISPLAY.get(base.model_class, base.model_class))
        )
    return resolved


def format_rmse(value: float, property_name: str) -> str:
    # density values sit an order of magnitude lower; give them an extra place
    return f"{value:.4f}" if property_name == "density" else f"{value:.3f}"


def format_percent(value: float | None) -> str:
    if value is None:
        return "-"
    if abs(value) < 5.0:
        return f"{value:.1f}%"
    return f"{round(value):d}%"


def _display_rows(reports):
    rows = []
    for r in reports:
        rows.append((
            r.property_name,
            MODEL_DISPLAY.get(r.model_class, r.model_class),
            r.stage1,
            r.stage2,
            format_rmse(r.val_rmse, r.property_name),
            format_rmse(r.test_rmse, r.property_name),
            format_percent(r.pct_improvement),
        ))
    return rows


def emit_report(reports, use_val: bool = False) -> tuple[str, str]:
    """Render reports as (plain-text table, CSV text).

    Output is deterministic byte-for-byte for identical inputs. The CSV keeps
    full-precision numbers plus label-space/seed/timestamp columns; the text
    table uses display rounding and notes the label space in a footer.
    """
    if not reports:
        raise ValueError("emit_report requires at least one report row")
    reports = resolve_improvements(reports, use_val=use_val)

    rows = _display_rows(reports)
    widths = [
        max(len(TABLE_COLUMNS[c]), *(len(row[c]) for row in rows))
        for c in range(len(TABLE_COLUMNS))
    ]
    lines = [
        "  ".join(name.ljust(w) for name, w in zip(TABLE_COLUMNS, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    spaces = sorted({r.label_space for r in reports})
    lines.append("")
    lines.append(f"RMSE computed in label space: {', '.join(spaces)}"
                 " (ln = natural-log transformed labels)")
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS + CSV_EXTRA_COLUMNS)
    for r in reports:
        writer.writerow([
            r.property_name,
            MODEL_DISPLAY.get(r.model_class, r.model_class),
            r.stage1,
            r.stage2,
            repr(r.val_rmse),
            repr(r.test_rmse),
            "" if r.pct_improvement is None else repr(r.pct_improvement),
            r.label_space,
            r.seed,
            r.timestamp,
        ])
    return text, buf.getvalue()
