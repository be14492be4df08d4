import numpy as np
import pytest

from furcnet import NetworkSpec, build, param_count
from furcnet.errors import InvalidSpecError, InvariantError, ShapeError
from furcnet.nn_core import (
    DenseLayer,
    Model,
    backward,
    forward,
    grad_check,
    init_params,
    predict,
)

from conftest import tiny_spec


def single_layer_model(weights, bias, activation="relu", dropout=0.0):
    """A bare trunk model around one hand-built layer (bypasses grid specs)."""
    layer = DenseLayer(np.asarray(weights, float), np.asarray(bias, float),
                       activation, dropout)
    spec = NetworkSpec("baseline", 1, layer.out_dim,
                       n_cation_features=layer.in_dim, n_anion_features=0,
                       n_state_vars=0, n_tasks=layer.out_dim, off_grid=True)
    return Model(spec, {"trunk": [layer]})


class TestInitParams:
    def test_same_spec_and_seed_is_bit_identical(self):
        spec = tiny_spec()
        a = init_params(spec, 99)
        b = init_params(spec, 99)
        for (ka, pa), (kb, pb) in zip(a.param_items(), b.param_items()):
            assert ka == kb
            assert np.array_equal(pa, pb)

    def test_different_seeds_differ(self):
        spec = tiny_spec()
        a = init_params(spec, 0)
        b = init_params(spec, 1)
        assert any(
            not np.array_equal(pa, pb)
            for (_, pa), (_, pb) in zip(a.param_items(), b.param_items())
        )

    def test_biases_are_exactly_zero(self):
        model = init_params(tiny_spec("baseline", tasks=3), 5)
        for key, param in model.param_items():
            if key.endswith(".b"):
                assert np.all(param == 0.0)

    def test_negative_seed_accepted(self):
        init_params(tiny_spec(), -17)

    def test_single_94_to_64_layer_has_6080_params(self):
        # per-layer count formula: in*out + out
        model = single_layer_model(np.zeros((94, 64)), np.zeros(64))
        assert param_count(model) == 94 * 64 + 64 == 6080

    def test_zero_width_rejected(self):
        spec = NetworkSpec("baseline", 2, 0, off_grid=True)
        with pytest.raises(InvalidSpecError):
            init_params(spec, 0)

    def test_glorot_weights_within_limit(self):
        model = init_params(tiny_spec("baseline"), 3)
        layer = model.blocks["trunk"][0]
        limit = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        assert np.all(np.abs(layer.weights) <= limit)


class TestForward:
    def test_zero_params_identity_head_gives_zero_outputs(self, rng):
        model = build(tiny_spec(tasks=3), 0)
        for _, param in model.param_items():
            param[...] = 0.0
        out, _ = forward(model, rng.standard_normal((5, 190)))
        assert np.array_equal(out, np.zeros((5, 3)))

    def test_eval_row_independent_of_batch_composition(self, rng):
        model = build(tiny_spec(), 2)
        batch = rng.standard_normal((6, 190))
        whole, _ = forward(model, batch, mode="eval")
        alone, _ = forward(model, batch[2:3], mode="eval")
        assert np.array_equal(whole[2:3], alone)

    def test_hand_arithmetic_single_relu_layer(self):
        model = single_layer_model([[2.0]], [1.0], activation="relu")
        out, _ = forward(model, [[-3.0]])
        assert out[0, 0] == 0.0  # relu(2*-3 + 1) = relu(-5)
        out, _ = forward(model, [[3.0]])
        assert out[0, 0] == 7.0  # relu(2*3 + 1)

    def test_wrong_batch_width_raises(self, rng):
        model = build(tiny_spec(), 2)
        with pytest.raises(ShapeError):
            forward(model, rng.standard_normal((2, 189)))

    def test_bad_mode_rejected(self, rng):
        model = build(tiny_spec(), 2)
        with pytest.raises(ValueError):
            forward(model, rng.standard_normal((2, 190)), mode="test")

    def test_eval_masks_are_all_ones(self, rng):
        model = build(tiny_spec(dropout=0.5), 2)
        _, trace = forward(model, rng.standard_normal((3, 190)), mode="eval")
        for traces in trace.block_traces.values():
            for tr in traces:
                assert np.all(tr.dropout_mask == 1.0)

    def test_train_masks_are_inverted_dropout_values(self, rng):
        model = build(tiny_spec("baseline", dropout=0.5), 2)
        _, trace = forward(model, rng.standard_normal((8, 190)), mode="train", rng=7)
        hidden = trace.block_traces["trunk"][0]
        assert set(np.unique(hidden.dropout_mask)) <= {0.0, 2.0}
        # output layer never drops
        assert np.all(trace.block_traces["trunk"][-1].dropout_mask == 1.0)

    def test_train_mode_seeded_masks_reproducible(self, rng):
        model = build(tiny_spec(dropout=0.5), 2)
        batch = rng.standard_normal((4, 190))
        out1, _ = forward(model, batch, mode="train", rng=11)
        out2, _ = forward(model, batch, mode="train", rng=11)
        assert np.array_equal(out1, out2)

    def test_trace_shapes_match_batch_and_widths(self, rng):
        model = build(tiny_spec(width=8), 2)
        _, trace = forward(model, rng.standard_normal((5, 190)))
        assert trace.batch_size == 5
        for name, layers in model.blocks.items():
            for layer, tr in zip(layers, trace.block_traces[name]):
                assert tr.pre.shape == (5, layer.out_dim)
                assert tr.post.shape == (5, layer.out_dim)
                assert tr.inputs.shape == (5, layer.in_dim)

    def test_predict_matches_eval_forward(self, rng):
        model = build(tiny_spec(tasks=3), 4)
        batch = rng.standard_normal((7, 190))
        out, _ = forward(model, batch, mode="eval")
        assert np.array_equal(predict(model, batch), out)

    def test_dropout_expectation_preserved(self, rng):
        # inverted dropout is unbiased per layer: averaging a hidden layer's
        # dropped-and-rescaled activations over many seeded draws recovers its
        # eval-mode activations to within 2%
        model = build(tiny_spec("baseline", dropout=0.5, width=16), 3)
        batch = rng.standard_normal((2, 190))
        _, eval_trace = forward(model, batch, mode="eval")
        eval_post = eval_trace.block_traces["trunk"][0].post
        draws = 20_000
        gen = np.random.default_rng(999)
        acc = np.zeros_like(eval_post)
        for _ in range(draws):
            _, tr = forward(model, batch, mode="train", rng=gen)
            acc += tr.block_traces["trunk"][0].post
        mean = acc / draws
        # dead units are exactly zero in both modes; active ones within 2%
        assert np.all(np.abs(mean - eval_post) <= 0.02 * np.abs(eval_post) + 1e-12)


class TestBackward:
    def test_zero_output_grad_gives_zero_gradients(self, rng):
        model = build(tiny_spec(), 3)
        batch = rng.standard_normal((4, 190))
        out, trace = forward(model, batch)
        grads = backward(model, trace, np.zeros_like(out))
        assert grads.max_abs() == 0.0

    def test_scalar_linear_case(self):
        # y = w*x with w=1, x=2: dL/dw = x * output_grad = 2
        model = single_layer_model([[1.0]], [0.0], activation="identity")
        out, trace = forward(model, [[2.0]])
        grads = backward(model, trace, [[1.0]])
        assert grads["trunk.0.W"][0, 0] == 2.0
        assert grads["trunk.0.b"][0] == 1.0

    def test_gradient_shapes_match_parameters(self, rng):
        model = build(tiny_spec(tasks=3), 1)
        out, trace = forward(model, rng.standard_normal((3, 190)))
        grads = backward(model, trace, np.ones_like(out))
        for key, param in model.param_items():
            assert grads[key].shape == param.shape

    def test_matches_finite_differences_small_model(self, rng):
        # dropout off, double precision, h=1e-5
        model = build(tiny_spec("simple_furcated", dropout=0.0, width=4), 6)
        batch = rng.standard_normal((3, 190))
        targets = rng.standard_normal((3, 1))
        assert grad_check(model, batch, targets, step=1e-5) < 1e-4

    def test_trace_model_mismatch_raises(self, rng):
        model_a = build(tiny_spec(), 1)
        model_b = build(tiny_spec("baseline"), 1)
        out, trace = forward(model_a, rng.standard_normal((2, 190)))
        with pytest.raises(InvariantError):
            backward(model_b, trace, np.zeros_like(out))

    def test_wrong_output_grad_shape_raises(self, rng):
        model = build(tiny_spec(), 1)
        out, trace = forward(model, rng.standard_normal((2, 190)))
        with pytest.raises(ShapeError):
            backward(model, trace, np.zeros((3, 1)))

    def test_dropout_masks_enter_gradients(self, rng):
        # with train-mode dropout recorded in the trace, gradients must flow
        # only through surviving units
        model = build(tiny_spec("baseline", dropout=0.5, width=8), 5)
        batch = rng.standard_normal((4, 190))
        out, trace = forward(model, batch, mode="train", rng=3)
        grads = backward(model, trace, np.ones_like(out))
        mask = trace.block_traces["trunk"][-2].dropout_mask  # last hidden layer
        dW_out = grads["trunk.2.W"]
        dropped_units = np.all(mask == 0.0, axis=0)
        assert np.all(dW_out[dropped_units, :] == 0.0)


class TestGradCheck:
    def test_fresh_extended_model_batch_of_4(self, rng):
        model = build(tiny_spec("extended_furcated", width=8, stage2_width=8), 0)
        batch = rng.standard_normal((4, 190))
        targets = rng.standard_normal((4, 1))
        assert grad_check(model, batch, targets) < 1e-4

    def test_all_zero_params_with_relu(self, rng):
        # dead ReLU zone: most gradients are exactly zero on both routes
        model = build(tiny_spec("baseline", width=8), 0)
        for _, param in model.param_items():
            param[...] = 0.0
        batch = rng.standard_normal((4, 190))
        targets = rng.standard_normal((4, 1)) + 2.0
        assert grad_check(model, batch, targets) < 1e-4

    def test_identity_single_layer_is_nearly_exact(self, rng):
        model = single_layer_model(rng.standard_normal((3, 2)),
                                   rng.standard_normal(2), activation="identity")
        batch = rng.standard_normal((5, 3))
        targets = rng.standard_normal((5, 2))
        assert grad_check(model, batch, targets) < 1e-8

    def test_weighted_loss_supported(self, rng):
        model = build(tiny_spec(tasks=3, width=4, stage2_width=4), 2)
        batch = rng.standard_normal((4, 190))
        targets = rng.standard_normal((4, 3))
        assert grad_check(model, batch, targets, task_weights=(5.0, 30.0, 1.0)) < 1e-4


class TestDenseLayer:
    def test_bias_shape_mismatch(self):
        with pytest.raises(ShapeError):
            DenseLayer(np.zeros((3, 2)), np.zeros(3))

    def test_bad_activation(self):
        with pytest.raises(InvalidSpecError):
            DenseLayer(np.zeros((2, 2)), np.zeros(2), activation="tanh")

    def test_bad_dropout(self):
        with pytest.raises(InvalidSpecError):
            DenseLayer(np.zeros((2, 2)), np.zeros(2), dropout_rate=1.0)
