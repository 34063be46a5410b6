"""
Tests for the tensor core and its tape
"""

import threading

import numpy as np
import pytest

from lib.nn import AdamW, BatchNorm2d, Linear, Parameter
from lib.tensor import (
    ShapeError, Tape, Tensor, as_tensor, attention, batch_norm, concat, conv2d, getitem, log,
    matmul, maximum, minimum, op_set, softmax, tensor_sum
)


class TestTape:
    def test_accumulates_gradient_through_reuse(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            y = tensor_sum(x * x + x)
            tape.backward(y)
        np.testing.assert_allclose(tape.grad(x), 2 * x.data + 1)

    def test_broadcast_gradient_is_summed_back(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            tape.backward(tensor_sum(a * b))
        np.testing.assert_allclose(tape.grad(b), [2.0, 2.0, 2.0])
        np.testing.assert_allclose(tape.grad(a), np.tile([1.0, 2.0, 3.0], (2, 1)))

    def test_no_tape_records_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * 2.0
        assert y.requires_grad
        with Tape() as tape:
            pass
        assert tape.records == []

    def test_constant_inputs_are_not_recorded(self):
        x = as_tensor(np.ones(3))
        assert not x.requires_grad
        with Tape() as tape:
            tensor_sum(x * 2.0)
        assert tape.records == []

    def test_backward_rejects_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
            with pytest.raises(ShapeError):
                tape.backward(y)

    def test_unreached_tensor_has_zero_grad(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        with Tape() as tape:
            tape.backward(tensor_sum(x * 3.0))
        assert not tape.has_grad(unused)
        np.testing.assert_array_equal(tape.grad(unused), [0.0])

    def test_tape_is_thread_local(self):
        x = Tensor([1.0], requires_grad=True)
        seen = []

        def other_thread():
            seen.append(Tape.current())
            x * 2.0

        with Tape() as tape:
            worker = threading.Thread(target=other_thread)
            worker.start()
            worker.join()
        assert seen == [None]
        assert tape.records == []

    def test_nested_tapes_record_innermost(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as outer:
            with Tape() as inner:
                y = x * x
            assert Tape.current() is outer
        assert len(inner.records) == 1
        assert outer.records == []
        assert y.item() == 4.0


class TestOps:
    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ShapeError):
            concat([np.ones((2, 3)), np.ones((3, 2))], axis=0)

    def test_softmax_rows_sum_to_one(self, rng):
        out = softmax(rng.standard_normal((4, 7)) * 50.0, axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4))

    def test_log_is_clamped(self):
        x = Tensor([0.0, -1.0, 1.0], requires_grad=True)
        with Tape() as tape:
            out = log(x)
            tape.backward(tensor_sum(out))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_array_equal(tape.grad(x), [0.0, 0.0, 1.0])

    def test_clamps_propagate_nan(self):
        x = Tensor([np.nan, 0.5, -1.0], requires_grad=True)
        with Tape() as tape:
            low = maximum(x, 1e-6)
            high = minimum(x, 0.25)
            tape.backward(tensor_sum(low) + tensor_sum(high))
        assert np.isnan(low.data[0]) and np.isnan(high.data[0])
        np.testing.assert_array_equal(low.data[1:], [0.5, 1e-6])
        np.testing.assert_array_equal(high.data[1:], [0.25, -1.0])
        # NaN entries route the gradient to the first input
        np.testing.assert_array_equal(tape.grad(x), [2.0, 1.0, 1.0])
        assert np.isnan(maximum(1.0, np.nan).item())

    def test_conv2d_matches_direct_sum(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        out = conv2d(as_tensor(x), as_tensor(w), padding=1).data
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((1, 3, 5, 5))
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    expected[0, o, i, j] = np.sum(padded[0, :, i:i + 3, j:j + 3] * w[o])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_grouped_strided_conv_shape(self, rng):
        x = as_tensor(rng.standard_normal((2, 4, 8, 8)))
        w = as_tensor(rng.standard_normal((6, 2, 2, 2)))
        assert conv2d(x, w, stride=2, groups=2).shape == (2, 6, 4, 4)
        with pytest.raises(ShapeError):
            conv2d(x, as_tensor(rng.standard_normal((6, 3, 2, 2))), groups=2)

    def test_getitem_fancy_index_accumulates(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        with Tape() as tape:
            tape.backward(tensor_sum(getitem(x, np.array([1, 1, 3]))))
        np.testing.assert_array_equal(tape.grad(x), [0.0, 2.0, 0.0, 1.0])

    def test_attention_weights_are_row_stochastic(self, rng):
        q, k, v = (as_tensor(rng.standard_normal((2, 5, 4))) for _ in range(3))
        out, weights = attention(q, k, v)
        assert out.shape == (2, 5, 4)
        np.testing.assert_allclose(weights.data.sum(axis=-1), np.ones((2, 5)))

    def test_batch_norm_single_sample_uses_running_stats(self, rng):
        x = as_tensor(rng.standard_normal((1, 2, 3, 3)))
        mean, var = np.array([0.5, -0.5]), np.array([2.0, 0.5])
        out = batch_norm(x, as_tensor(np.ones(2)), as_tensor(np.zeros(2)), mean.copy(), var.copy(), training=True)
        expected = (x.data - mean[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(out.data, expected)

    def test_batch_norm_updates_running_stats_in_train_mode(self, rng):
        layer = BatchNorm2d(3)
        layer(as_tensor(rng.standard_normal((4, 3, 2, 2)) + 5.0))
        assert np.all(layer.running_mean > 0.4)
        layer.eval()
        before = layer.running_mean.copy()
        layer(as_tensor(rng.standard_normal((4, 3, 2, 2))))
        np.testing.assert_array_equal(layer.running_mean, before)

    def test_op_set_is_complete(self):
        assert len(op_set()) == len(set(op_set()))
        assert {"conv2d", "attention", "layer_norm", "batch_norm", "arccos"} <= set(op_set())


class TestOptimizer:
    def test_frozen_parameters_do_not_move(self, rng):
        layer = Linear(3, 2, rng)
        layer.weight.requires_grad = False
        before = layer.weight.numpy()
        optimizer = AdamW(layer.parameters(), lr=0.1)
        with Tape() as tape:
            tape.backward(tensor_sum(layer(as_tensor(np.ones((1, 3))))))
        optimizer.step(tape)
        np.testing.assert_array_equal(layer.weight.data, before)
        assert layer.weight not in optimizer.params

    def test_parameter_outside_graph_is_untouched(self):
        used, unused = Parameter(np.ones(2)), Parameter(np.ones(2))
        optimizer = AdamW([used, unused], lr=0.1, weight_decay=0.5)
        with Tape() as tape:
            tape.backward(tensor_sum(used * 3.0))
        optimizer.step(tape)
        np.testing.assert_array_equal(unused.data, [1.0, 1.0])
        assert np.all(used.data < 1.0)

    def test_learning_rate_drops_once(self):
        optimizer = AdamW([Parameter(np.zeros(1))], lr=1.0, decay_step=2)
        rates = []
        for _ in range(4):
            rates.append(optimizer.current_lr())
            with Tape() as tape:
                tape.backward(tensor_sum(optimizer.params[0] * 1.0))
            optimizer.step(tape)
        assert rates == [1.0, 1.0, 0.1, 0.1]
