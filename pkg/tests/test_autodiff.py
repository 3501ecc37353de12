import threading

import numpy as np
import pytest

from autodiff import (
    Tape,
    Tensor4,
    activation,
    backward,
    check_finite,
    concat_channels,
    current_tape,
    gram,
    leaky_relu,
    relu,
    scalar,
    slice_spatial,
)
from errors import ConfigurationError, NumericError


def t(values, grad=True):
    return Tensor4(np.asarray(values, dtype=np.float64), requires_grad=grad)


class TestTensor4:
    def test_rejects_non_rank_four(self):
        with pytest.raises(ConfigurationError):
            Tensor4(np.zeros((2, 3)))

    def test_integer_data_promoted_to_float64(self):
        assert Tensor4(np.ones((1, 1, 2, 2), dtype=np.int32)).dtype == np.float64

    def test_dims(self):
        x = Tensor4(np.zeros((2, 3, 4, 5)))
        assert (x.n, x.c, x.h, x.w) == (2, 3, 4, 5)
        assert x.size == 120

    def test_item_needs_single_element(self):
        assert scalar(2.5).item() == 2.5
        with pytest.raises(ConfigurationError):
            Tensor4(np.zeros((1, 1, 1, 2))).item()

    def test_check_finite(self):
        check_finite(scalar(1.0), "ok")
        with pytest.raises(NumericError):
            check_finite(scalar(np.nan), "loss")


class TestTape:
    def test_no_tape_records_nothing(self):
        x = t([[[[1.0, 2.0]]]])
        y = (x * 3.0).sum()
        assert y._producer is None
        assert not y.requires_grad

    def test_active_tape_is_thread_local(self):
        seen = []
        with Tape():
            thread = threading.Thread(target=lambda: seen.append(current_tape()))
            thread.start()
            thread.join()
            assert current_tape() is not None
        assert seen == [None]
        assert current_tape() is None

    def test_mean_gradient(self):
        x = t(np.arange(8.0).reshape(1, 2, 2, 2))
        with Tape() as tape:
            loss = x.mean()
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, np.full(x.shape, 1 / 8))

    def test_square_accumulates_both_uses(self):
        x = t([[[[1.0, -2.0, 3.0]]]])
        with Tape() as tape:
            loss = (x * x).sum()
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_disjoint_graph_gets_zero_gradient(self):
        x, w = t(np.ones((1, 1, 2, 2))), t(np.ones((1, 1, 2, 2)))
        with Tape() as tape:
            loss = (x * 2.0).sum()
            _ = (w * 3.0).sum()
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, 2.0)
        np.testing.assert_array_equal(w.grad, np.zeros_like(w.data))

    def test_broadcast_gradient_sums_over_expanded_dims(self):
        a = t(np.ones((2, 2, 3, 3)))
        b = t(np.array([2.0, 5.0]).reshape(1, 2, 1, 1))
        with Tape() as tape:
            loss = (a * b).sum()
        backward(tape, loss)
        np.testing.assert_allclose(b.grad.reshape(-1), [18.0, 18.0])
        np.testing.assert_allclose(a.grad[:, 1], 5.0)

    def test_rsub_and_scalar_division(self):
        x = t(np.full((1, 1, 1, 2), 4.0))
        with Tape() as tape:
            loss = ((1.0 - x) / 2.0).sum()
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, -0.5)
        np.testing.assert_allclose(loss.item(), -3.0)

    def test_backward_needs_scalar_loss(self):
        x = t(np.ones((1, 1, 2, 2)))
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ConfigurationError):
            backward(tape, y)

    def test_backward_needs_loss_from_same_tape(self):
        x = t(np.ones((1, 1, 2, 2)))
        with Tape():
            loss = x.sum()
        with pytest.raises(ConfigurationError):
            backward(Tape(), loss)


class TestActivations:
    def test_relu_and_leaky_relu_values(self):
        x = t([[[[-1.5, -1.0, 2.0]]]])
        np.testing.assert_allclose(relu(x).data.reshape(-1), [0.0, 0.0, 2.0])
        np.testing.assert_allclose(leaky_relu(x).data.reshape(-1), [-0.3, -0.2, 2.0])

    def test_leaky_relu_gradient_positive_side(self):
        x = t([[[[2.0]]]])
        with Tape() as tape:
            loss = leaky_relu(x).sum()
        backward(tape, loss)
        assert x.grad.item() == 1.0

    def test_sigmoid_midpoint(self):
        assert activation(t([[[[0.0]]]]), "sigmoid").item() == 0.5

    def test_unknown_activation(self):
        with pytest.raises(ConfigurationError):
            activation(t([[[[0.0]]]]), "tanh")


class TestShapeOps:
    def test_concat_dims_and_gradient(self, rng):
        a = t(rng.normal(size=(1, 2, 4, 4)))
        b = Tensor4(np.zeros((1, 3, 4, 4)))
        with Tape() as tape:
            y = concat_channels(a, b)
            loss = y.sum()
        backward(tape, loss)
        assert y.shape == (1, 5, 4, 4)
        np.testing.assert_array_equal(y.data[:, :2], a.data)
        np.testing.assert_allclose(a.grad, 1.0)

    def test_concat_rejects_spatial_mismatch(self):
        with pytest.raises(ConfigurationError):
            concat_channels(Tensor4(np.zeros((1, 1, 4, 4))), Tensor4(np.zeros((1, 1, 2, 2))))

    def test_slice_scatters_gradient(self):
        x = t(np.arange(16.0).reshape(1, 1, 4, 4))
        with Tape() as tape:
            loss = slice_spatial(x, (1, 3), (0, 2)).sum()
        backward(tape, loss)
        expected = np.zeros((1, 1, 4, 4))
        expected[:, :, 1:3, 0:2] = 1.0
        np.testing.assert_array_equal(x.grad, expected)
        assert loss.item() == 4 + 5 + 8 + 9

    def test_slice_out_of_range(self):
        with pytest.raises(ConfigurationError):
            slice_spatial(Tensor4(np.zeros((1, 1, 2, 2))), (0, 3), (0, 1))


class TestGram:
    def test_outer_product_fixture(self):
        x = Tensor4(np.array([2.0, 3.0]).reshape(1, 2, 1, 1))
        np.testing.assert_allclose(gram(x).data[0, 0], [[4.0, 6.0], [6.0, 9.0]])

    def test_zero_features(self):
        assert not gram(Tensor4(np.zeros((2, 3, 4, 4)))).data.any()

    def test_matches_double_loop(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        g = gram(Tensor4(x), scale=0.5).data
        for b in range(2):
            for i in range(3):
                for j in range(3):
                    expected = 0.5 * sum(x[b, i, p, q] * x[b, j, p, q] for p in range(4) for q in range(5))
                    np.testing.assert_allclose(g[b, 0, i, j], expected, rtol=1e-12)
