"""Dense layers, forward/backward passes, and finite-difference gradient checking.

All arithmetic is float64. A Model is a set of named layer blocks; baseline
models have a single "trunk" block, furcated models have "cation" and "anion"
stage-1 blocks whose outputs are concatenated with the state variables and fed
to a "merged" block. Backpropagation is hand-rolled: `forward` records an
ActivationTrace and `backward` replays it to produce exact analytic gradients,
which `grad_check` verifies against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator

import numpy as np

from .errors import InvalidSpecError, InvariantError, NumericError, ShapeError

if TYPE_CHECKING:
    from .arch import NetworkSpec

ACTIVATIONS = ("relu", "identity")


def as_generator(seed) -> np.random.Generator:
    """Coerce an int seed (any sign) or an existing Generator to a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ValueError("a seed or Generator is required here")
    # map negative seeds into the uint64 range so "any integer" is accepted
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


@dataclass
class DenseLayer:
    """One fully connected layer: out = activation(x @ weights + bias)."""

    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_dim {self.weights.shape[1]}"
            )
        if self.activation not in ACTIVATIONS:
            raise InvalidSpecError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidSpecError(f"dropout_rate {self.dropout_rate} not in [0, 1)")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "DenseLayer":
        return DenseLayer(
            self.weights.copy(), self.bias.copy(), self.activation, self.dropout_rate
        )


@dataclass
class Model:
    """Layer parameters plus the connectivity implied by the spec's class."""

    spec: "NetworkSpec"
    blocks: dict[str, list[DenseLayer]]

    @property
    def furcated(self) -> bool:
        return "trunk" not in self.blocks

    @property
    def input_dim(self) -> int:
        s = self.spec
        return s.n_cation_features + s.n_anion_features + s.n_state_vars

    @property
    def output_dim(self) -> int:
        tail = self.blocks["merged" if self.furcated else "trunk"]
        return tail[-1].out_dim

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """All parameter arrays as (path, array) in a fixed deterministic order."""
        items = []
        for name, layers in self.blocks.items():
            for i, layer in enumerate(layers):
                items.append((f"{name}.{i}.W", layer.weights))
                items.append((f"{name}.{i}.b", layer.bias))
        return items

    def layer_items(self) -> Iterator[tuple[str, int, DenseLayer]]:
        for name, layers in self.blocks.items():
            for i, layer in enumerate(layers):
                yield name, i, layer

    def copy(self) -> "Model":
        return Model(self.spec, {n: [l.copy() for l in ls] for n, ls in self.blocks.items()})


@dataclass
class LayerTrace:
    """Recorded values for one layer of one forward pass."""

    inputs: np.ndarray  # (B, in_dim)
    pre: np.ndarray  # (B, out_dim), pre-activation
    post: np.ndarray  # (B, out_dim), after activation and dropout
    dropout_mask: np.ndarray  # (B, out_dim) multiplier: 1 in eval, 0 or 1/(1-rate) in train


@dataclass
class ActivationTrace:
    """Everything `backward` needs to replay a forward pass."""

    mode: str  # "train" | "eval"
    batch_size: int
    block_traces: dict[str, list[LayerTrace]]
    outputs: np.ndarray


@dataclass
class GradientSet:
    """Per-parameter gradients keyed exactly like Model.param_items()."""

    data: dict[str, np.ndarray]

    def __getitem__(self, key: str) -> np.ndarray:
        return self.data[key]

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(g))) for g in self.data.values())


def init_params(spec: "NetworkSpec", seed: int) -> Model:
    """Build a Model from a spec's layer plan.

    Weights are Glorot-uniform (limit sqrt(6/(fan_in+fan_out))), biases zero;
    fully deterministic given (spec, seed).
    """
    rng = as_generator(seed)
    blocks: dict[str, list[DenseLayer]] = {}
    for name, rows in spec.layer_plan().items():
        layers = []
        for in_dim, out_dim, activation, dropout in rows:
            if in_dim <= 0 or out_dim <= 0:
                raise InvalidSpecError(
                    f"layer dims must be positive, got {in_dim}x{out_dim} in block {name!r}"
                )
            limit = np.sqrt(6.0 / (in_dim + out_dim))
            weights = rng.uniform(-limit, limit, size=(in_dim, out_dim))
            layers.append(DenseLayer(weights, np.zeros(out_dim), activation, dropout))
        blocks[name] = layers
    return Model(spec, blocks)


def _split_inputs(model: Model, batch: np.ndarray):
    s = model.spec
    nc, na = s.n_cation_features, s.n_anion_features
    return batch[:, :nc], batch[:, nc : nc + na], batch[:, nc + na :]


def _check_batch(model: Model, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise ShapeError(f"batch must be a non-empty 2-D array, got shape {batch.shape}")
    if batch.shape[1] != model.input_dim:
        raise ShapeError(
            f"batch width {batch.shape[1]} does not match model input dim {model.input_dim}"
        )
    return batch


def _block_forward(layers, x, mode, rng):
    traces = []
    for layer in layers:
        pre = x @ layer.weights + layer.bias
        post = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
        if mode == "train" and layer.dropout_rate > 0.0:
            keep = rng.random(post.shape) >= layer.dropout_rate
            # inverted dropout: surviving units scaled so eval needs no rescaling
            mask = keep.astype(np.float64) / (1.0 - layer.dropout_rate)
            post = post * mask
        else:
            mask = np.ones_like(post)
        traces.append(LayerTrace(x, pre, post, mask))
        x = post
    return x, traces


def forward(model: Model, batch, mode: str = "eval", rng=None):
    """Run the model on a batch, returning (outputs, ActivationTrace).

    In train mode dropout masks are drawn from `rng` (an int seed or a
    numpy Generator); in eval mode dropout is the identity and `rng` is
    ignored. Blocks are evaluated in the fixed order cation, anion, merged,
    so mask draws are reproducible.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = _check_batch(model, batch)
    gen = as_generator(rng) if mode == "train" else None

    if model.furcated:
        xc, xa, xs = _split_inputs(model, batch)
        c_out, c_tr = _block_forward(model.blocks["cation"], xc, mode, gen)
        a_out, a_tr = _block_forward(model.blocks["anion"], xa, mode, gen)
        merged_in = np.hstack([c_out, a_out, xs])
        out, m_tr = _block_forward(model.blocks["merged"], merged_in, mode, gen)
        traces = {"cation": c_tr, "anion": a_tr, "merged": m_tr}
    else:
        out, tr = _block_forward(model.blocks["trunk"], batch, mode, gen)
        traces = {"trunk": tr}
    return out, ActivationTrace(mode, batch.shape[0], traces, out)


def _eval_block(layers, x):
    for layer in layers:
        x = x @ layer.weights + layer.bias
        if layer.activation == "relu":
            np.maximum(x, 0.0, out=x)
    return x


def predict(model: Model, batch) -> np.ndarray:
    """Eval-mode outputs without trace recording (fast path)."""
    batch = _check_batch(model, batch)
    if not model.furcated:
        return _eval_block(model.blocks["trunk"], batch)
    xc, xa, xs = _split_inputs(model, batch)
    c_out = _eval_block(model.blocks["cation"], xc)
    a_out = _eval_block(model.blocks["anion"], xa)
    return _eval_block(model.blocks["merged"], np.hstack([c_out, a_out, xs]))


def _check_trace(model: Model, trace: ActivationTrace):
    if set(trace.block_traces) != set(model.blocks):
        raise InvariantError(
            f"trace blocks {sorted(trace.block_traces)} do not match model blocks "
            f"{sorted(model.blocks)}"
        )
    for name, layers in model.blocks.items():
        traces = trace.block_traces[name]
        if len(traces) != len(layers):
            raise InvariantError(f"trace for block {name!r} has wrong layer count")
        for i, (layer, tr) in enumerate(zip(layers, traces)):
            if tr.inputs.shape != (trace.batch_size, layer.in_dim) or tr.pre.shape != (
                trace.batch_size,
                layer.out_dim,
            ):
                raise InvariantError(f"trace shape mismatch at {name}.{i}")


def _block_backward(name, layers, traces, grad_out, store):
    g = grad_out
    for i in reversed(range(len(layers))):
        layer, tr = layers[i], traces[i]
        g = g * tr.dropout_mask
        if layer.activation == "relu":
            g = g * (tr.pre > 0.0)
        store[f"{name}.{i}.W"] = tr.inputs.T @ g
        store[f"{name}.{i}.b"] = g.sum(axis=0)
        g = g @ layer.weights.T
    return g


def backward(model: Model, trace: ActivationTrace, output_grad) -> GradientSet:
    """Exact analytic gradients of the traced forward pass.

    `output_grad` is dLoss/dOutputs and carries whatever batch normalization
    the loss uses; backward itself is a pure vector-Jacobian product, so a
    zero output_grad yields zero gradients everywhere. Dropout masks are
    applied exactly as recorded in the trace.
    """
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != trace.outputs.shape:
        raise ShapeError(
            f"output_grad shape {output_grad.shape} does not match outputs "
            f"{trace.outputs.shape}"
        )
    _check_trace(model, trace)
    store: dict[str, np.ndarray] = {}
    if model.furcated:
        merged_grad = _block_backward(
            "merged", model.blocks["merged"], trace.block_traces["merged"], output_grad, store
        )
        wc = model.blocks["cation"][-1].out_dim
        wa = model.blocks["anion"][-1].out_dim
        _block_backward(
            "cation", model.blocks["cation"], trace.block_traces["cation"],
            merged_grad[:, :wc], store,
        )
        _block_backward(
            "anion", model.blocks["anion"], trace.block_traces["anion"],
            merged_grad[:, wc : wc + wa], store,
        )
        # the state-variable slice of merged_grad goes to inputs, not parameters
    else:
        _block_backward("trunk", model.blocks["trunk"], trace.block_traces["trunk"],
                        output_grad, store)
    ordered = {key: store[key] for key, _ in model.param_items()}
    return GradientSet(ordered)


def _weighted_mse(outputs, targets, weights):
    total = 0.0
    for t in range(targets.shape[1]):
        total += weights[t] * float(np.mean((outputs[:, t] - targets[:, t]) ** 2))
    return total


def grad_check(model: Model, batch, targets, task_weights=None, step: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    The loss is the weighted mean-squared error over the batch. Runs in eval
    mode, so dropout is inactive. The relative error for each parameter is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).

    Central differences of a loss of magnitude L carry cancellation noise of
    order eps*L/(2*step) (~1e-11 for L~1, step 1e-5), so gradient entries
    below roughly 1e5 times that floor cannot be resolved to any useful
    relative precision. Such entries are excluded from the relative maximum
    and instead required to agree within the floor itself; dead-ReLU entries
    that are exactly zero on both routes contribute zero either way.
    """
    batch = _check_batch(model, batch)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (batch.shape[0], model.output_dim):
        raise ShapeError(
            f"targets shape {targets.shape} does not match (batch, out) "
            f"({batch.shape[0]}, {model.output_dim})"
        )
    weights = (
        np.ones(model.output_dim) if task_weights is None
        else np.asarray(task_weights, dtype=np.float64)
    )

    outputs, trace = forward(model, batch, mode="eval")
    grad_out = 2.0 * weights * (outputs - targets) / batch.shape[0]
    analytic = backward(model, trace, grad_out)

    base_loss = _weighted_mse(outputs, targets, weights)
    resolvable = 1e5 * np.finfo(np.float64).eps * max(1.0, abs(base_loss)) / (2.0 * step)

    max_err = 0.0
    for key, param in model.param_items():
        a = analytic[key]
        flat = param.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = _weighted_mse(predict(model, batch), targets, weights)
            flat[i] = orig - step
            f_minus = _weighted_mse(predict(model, batch), targets, weights)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while perturbing {key}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * step)
            diff = abs(a_flat[i] - numeric)
            if max(abs(a_flat[i]), abs(numeric)) < resolvable and diff <= resolvable:
                continue  # below the finite-difference resolution floor
            err = diff / max(abs(a_flat[i]), abs(numeric), 1e-12)
            if err > max_err:
                max_err = err
    if not np.isfinite(max_err):
        raise NumericError("non-finite gradient-check result")
    return max_err


def param_count(model: Model) -> int:
    """Total trainable parameters: sum over layers of in*out + out."""
    return sum(arr.size for _, arr in model.param_items())
