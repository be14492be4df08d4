"""Network architecture classes, spec validation, builders, and model files.

Three classes are supported:

* ``baseline`` — one MLP over all 190 inputs.
* ``simple_furcated`` — separate cation/anion sub-networks; their outputs plus
  the two state variables feed a single affine output layer.
* ``extended_furcated`` — same stage-1 sub-networks, but the concatenation
  feeds a second MLP stage before the output layer.

State variables never enter stage-1 sub-networks; they join at the merge
point. Cation and anion sub-networks share depth/width (weights independent).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidSpecError,
    ShapeInconsistencyError,
    TruncatedPayloadError,
    UnknownTokenError,
    VersionMismatchError,
)
from .nn_core import DenseLayer, Model, init_params, param_count

GRID_DEPTHS = (2, 3, 4, 5)
GRID_WIDTHS = (16, 32, 64, 128, 256, 512)
ARCH_CLASSES = ("baseline", "simple_furcated", "extended_furcated")
TASK_COUNTS = (1, 3)

MODEL_FORMAT_HEADER = "furcnet-model v1"

_STAGE_RE = re.compile(r"^(\d+)\((\d+)\)$")


def format_stage(depth: int, width: int) -> str:
    """Render depth/width in the d(w) convention, e.g. 3 layers of 128 -> "3(128)"."""
    return f"{depth}({width})"


def parse_stage(text: str) -> tuple[int, int]:
    """Parse a d(w) string like "2(64)" into (depth, width)."""
    m = _STAGE_RE.match(text.strip())
    if not m:
        raise InvalidSpecError(f"cannot parse stage spec {text!r}; expected form '2(64)'")
    return int(m.group(1)), int(m.group(2))


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative architecture description from which a Model is built."""

    arch_class: str
    stage1_depth: int
    stage1_width: int
    stage2_depth: int | None = None
    stage2_width: int | None = None
    n_cation_features: int = 94
    n_anion_features: int = 94
    n_state_vars: int = 2
    n_tasks: int = 1
    hidden_dropout: float = 0.5
    off_grid: bool = False  # allow depth/width/tasks outside the canonical grid

    def validate(self):
        if self.arch_class not in ARCH_CLASSES:
            raise InvalidSpecError(f"unknown arch_class {self.arch_class!r}")
        if self.n_cation_features <= 0 or self.n_anion_features <= 0:
            raise InvalidSpecError("component feature counts must be positive")
        if self.n_state_vars < 0:
            raise InvalidSpecError("n_state_vars must be >= 0")
        if self.n_tasks < 1:
            raise InvalidSpecError("n_tasks must be >= 1")
        if not 0.0 <= self.hidden_dropout < 1.0:
            raise InvalidSpecError(f"hidden_dropout {self.hidden_dropout} not in [0, 1)")

        extended = self.arch_class == "extended_furcated"
        if extended and (self.stage2_depth is None or self.stage2_width is None):
            raise InvalidSpecError("extended_furcated requires stage2_depth and stage2_width")
        if not extended and not (self.stage2_depth is None and self.stage2_width is None):
            raise InvalidSpecError("stage2 fields are only valid for extended_furcated")

        stages = [(self.stage1_depth, self.stage1_width)]
        if extended:
            stages.append((self.stage2_depth, self.stage2_width))
        for depth, width in stages:
            if depth < 1 or width < 1:
                raise InvalidSpecError(f"depth/width must be positive, got {depth}({width})")
            if not self.off_grid and (depth not in GRID_DEPTHS or width not in GRID_WIDTHS):
                raise InvalidSpecError(
                    f"{format_stage(depth, width)} is outside the search grid "
                    f"(depths {GRID_DEPTHS}, widths {GRID_WIDTHS}); set off_grid to override"
                )
        if not self.off_grid and self.n_tasks not in TASK_COUNTS:
            raise InvalidSpecError(
                f"n_tasks {self.n_tasks} not in {TASK_COUNTS}; set off_grid to override"
            )

    @property
    def input_dim(self) -> int:
        return self.n_cation_features + self.n_anion_features + self.n_state_vars

    def layer_plan(self) -> dict[str, list[tuple[int, int, str, float]]]:
        """Per-block layer shapes: block -> [(in, out, activation, dropout), ...].

        Hidden layers are ReLU with dropout; the output layer is identity with
        no dropout. Dropout sits after each hidden layer's activation, never
        after the output layer.
        """
        d1, w1, drop = self.stage1_depth, self.stage1_width, self.hidden_dropout

        def hidden_stack(in_dim, depth, width):
            rows = [(in_dim, width, "relu", drop)]
            rows += [(width, width, "relu", drop)] * (depth - 1)
            return rows

        if self.arch_class == "baseline":
            rows = hidden_stack(self.input_dim, d1, w1)
            rows.append((w1, self.n_tasks, "identity", 0.0))
            return {"trunk": rows}

        cation = hidden_stack(self.n_cation_features, d1, w1)
        anion = hidden_stack(self.n_anion_features, d1, w1)
        merge_dim = 2 * w1 + self.n_state_vars
        if self.arch_class == "simple_furcated":
            merged = [(merge_dim, self.n_tasks, "identity", 0.0)]
        else:
            merged = hidden_stack(merge_dim, self.stage2_depth, self.stage2_width)
            merged.append((self.stage2_width, self.n_tasks, "identity", 0.0))
        return {"cation": cation, "anion": anion, "merged": merged}

    def stage1_label(self) -> str:
        return format_stage(self.stage1_depth, self.stage1_width)

    def stage2_label(self) -> str:
        if self.arch_class != "extended_furcated":
            return "-"
        return format_stage(self.stage2_depth, self.stage2_width)

    def order_key(self) -> tuple:
        return (
            self.stage1_depth,
            self.stage1_width,
            self.stage2_depth or 0,
            self.stage2_width or 0,
        )


def build(spec: NetworkSpec, seed: int) -> Model:
    """Validate a spec and initialize its Model (Glorot weights, zero biases)."""
    spec.validate()
    return init_params(spec, seed)


def spec_param_count(spec: NetworkSpec) -> int:
    """Parameter count implied by a spec, without building it."""
    return sum(
        i * o + o for rows in spec.layer_plan().values() for (i, o, _act, _dr) in rows
    )


# --- model file format -------------------------------------------------------
#
# Line-oriented text, UTF-8. Layout:
#
#   furcnet-model v1
#   arch_class <token>
#   stage1 <depth> <width>
#   stage2 <depth> <width> | stage2 - -
#   features <n_cation> <n_anion> <n_state>
#   tasks <n>
#   hidden_dropout <float repr>
#   off_grid <true|false>
#   block <name> <n_layers>          (repeated per block)
#   layer <in> <out> <activation> <dropout repr>
#   w <in rows of out hex floats>
#   b <out hex floats>
#   end
#
# Parameters use float.hex() so round-trips are bit-exact.


def serialize(model: Model) -> bytes:
    """Versioned self-describing text encoding of a model; lossless."""
    s = model.spec
    lines = [MODEL_FORMAT_HEADER]
    lines.append(f"arch_class {s.arch_class}")
    lines.append(f"stage1 {s.stage1_depth} {s.stage1_width}")
    if s.stage2_depth is None:
        lines.append("stage2 - -")
    else:
        lines.append(f"stage2 {s.stage2_depth} {s.stage2_width}")
    lines.append(f"features {s.n_cation_features} {s.n_anion_features} {s.n_state_vars}")
    lines.append(f"tasks {s.n_tasks}")
    lines.append(f"hidden_dropout {s.hidden_dropout!r}")
    lines.append(f"off_grid {'true' if s.off_grid else 'false'}")
    for name, layers in model.blocks.items():
        lines.append(f"block {name} {len(layers)}")
        for layer in layers:
            lines.append(
                f"layer {layer.in_dim} {layer.out_dim} {layer.activation} "
                f"{layer.dropout_rate!r}"
            )
            for row in layer.weights:
                lines.append("w " + " ".join(v.hex() for v in row))
            lines.append("b " + " ".join(v.hex() for v in layer.bias))
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("utf-8")


class _LineReader:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, context: str) -> str:
        if self.pos >= len(self.lines):
            raise TruncatedPayloadError(f"payload ended while reading {context}")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def expect(self, prefix: str, context: str, arity: int | None = None) -> list[str]:
        line = self.next(context)
        parts = line.split()
        if not parts or parts[0] != prefix:
            raise UnknownTokenError(f"expected {prefix!r} line for {context}, got {line!r}")
        if arity is not None and len(parts) - 1 != arity:
            raise ShapeInconsistencyError(
                f"{context}: {prefix!r} line has {len(parts) - 1} fields, expected {arity}"
            )
        return parts[1:]


def _parse_int(token: str, context: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise UnknownTokenError(f"bad integer {token!r} in {context}") from None


def _parse_float(token: str, context: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise UnknownTokenError(f"bad float {token!r} in {context}") from None


def _parse_hex_row(tokens, expected, context):
    if len(tokens) != expected:
        raise ShapeInconsistencyError(
            f"{context}: declared width {expected} but found {len(tokens)} values"
        )
    try:
        return np.array([float.fromhex(t) for t in tokens], dtype=np.float64)
    except ValueError:
        raise UnknownTokenError(f"bad float token in {context}") from None


def deserialize(payload: bytes) -> Model:
    """Parse a model file produced by `serialize`; exact inverse."""
    reader = _LineReader(payload.decode("utf-8"))
    header = reader.next("header")
    if header.strip() != MODEL_FORMAT_HEADER:
        raise VersionMismatchError(
            f"unsupported model format header {header!r}; expected {MODEL_FORMAT_HEADER!r}"
        )

    (arch_class,) = reader.expect("arch_class", "arch_class", 1)
    if arch_class not in ARCH_CLASSES:
        raise UnknownTokenError(f"unknown arch_class token {arch_class!r}")
    d1, w1 = reader.expect("stage1", "stage1", 2)
    s2 = reader.expect("stage2", "stage2", 2)
    feats = reader.expect("features", "features", 3)
    (tasks,) = reader.expect("tasks", "tasks", 1)
    (dropout,) = reader.expect("hidden_dropout", "hidden_dropout", 1)
    (off_grid,) = reader.expect("off_grid", "off_grid", 1)
    if off_grid not in ("true", "false"):
        raise UnknownTokenError(f"unknown off_grid token {off_grid!r}")

    spec = NetworkSpec(
        arch_class=arch_class,
        stage1_depth=_parse_int(d1, "stage1"),
        stage1_width=_parse_int(w1, "stage1"),
        stage2_depth=None if s2[0] == "-" else _parse_int(s2[0], "stage2"),
        stage2_width=None if s2[1] == "-" else _parse_int(s2[1], "stage2"),
        n_cation_features=_parse_int(feats[0], "features"),
        n_anion_features=_parse_int(feats[1], "features"),
        n_state_vars=_parse_int(feats[2], "features"),
        n_tasks=_parse_int(tasks, "tasks"),
        hidden_dropout=_parse_float(dropout, "hidden_dropout"),
        off_grid=off_grid == "true",
    )
    spec.validate()

    expected_plan = spec.layer_plan()
    blocks: dict[str, list[DenseLayer]] = {}
    for name, plan_rows in expected_plan.items():
        block_name, n_layers = reader.expect("block", f"block {name}", 2)
        if block_name != name:
            raise ShapeInconsistencyError(
                f"expected block {name!r} next, found {block_name!r}"
            )
        if _parse_int(n_layers, f"block {name}") != len(plan_rows):
            raise ShapeInconsistencyError(
                f"block {name!r} declares {n_layers} layers; spec implies {len(plan_rows)}"
            )
        layers = []
        for li, (in_dim, out_dim, _act, _dr) in enumerate(plan_rows):
            ctx = f"{name}.{li}"
            fields = reader.expect("layer", ctx, 4)
            got_in, got_out = _parse_int(fields[0], ctx), _parse_int(fields[1], ctx)
            activation = fields[2]
            if activation not in ("relu", "identity"):
                raise UnknownTokenError(f"unknown activation token {activation!r} in {ctx}")
            if (got_in, got_out) != (in_dim, out_dim):
                raise ShapeInconsistencyError(
                    f"{ctx}: declared {got_in}x{got_out}, spec implies {in_dim}x{out_dim}"
                )
            rows = [
                _parse_hex_row(reader.expect("w", f"{ctx} weights row {r}"), out_dim,
                               f"{ctx} weights row {r}")
                for r in range(in_dim)
            ]
            bias = _parse_hex_row(reader.expect("b", f"{ctx} bias"), out_dim, f"{ctx} bias")
            layers.append(
                DenseLayer(np.vstack(rows), bias, activation,
                           _parse_float(fields[3], f"{ctx} dropout"))
            )
        blocks[name] = layers
    reader.expect("end", "end marker")
    return Model(spec, blocks)


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


__all__ = [
    "ARCH_CLASSES",
    "GRID_DEPTHS",
    "GRID_WIDTHS",
    "NetworkSpec",
    "build",
    "deserialize",
    "format_stage",
    "load_model",
    "param_count",
    "parse_stage",
    "save_model",
    "serialize",
    "spec_param_count",
]
