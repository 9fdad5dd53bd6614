import math

import numpy as np
import numpy.testing as npt
import pytest

from anclaf import layers as L
from anclaf import tensor as T
from anclaf.errors import ShapeError
from anclaf.tensor import Tensor

from gradcheck import check_gradients


class TestAffine:
    def test_identity(self):
        layer = L.AffineLayer(Tensor(np.eye(2)), Tensor(np.zeros(2)), "none")
        npt.assert_array_equal(layer.forward(Tensor([1.0, 2.0])).data, [1.0, 2.0])

    def test_hand_dot_product(self):
        layer = L.AffineLayer(Tensor([[1.0, 1.0]]), Tensor([1.0]), "none")
        # 1*2 + 1*3 + 1 = 6
        npt.assert_array_equal(layer.forward(Tensor([2.0, 3.0])).data, [6.0])

    def test_zero_weight_sigmoid(self):
        layer = L.AffineLayer(Tensor([[0.0, 0.0]]), Tensor([0.0]), "sigmoid")
        for x in ([5.0, -3.0], [0.0, 0.0]):
            npt.assert_array_equal(layer.forward(Tensor(x)).data, [0.5])

    def test_shape_mismatch(self):
        layer = L.AffineLayer(Tensor(np.eye(2)), Tensor(np.zeros(2)), "none")
        with pytest.raises(ShapeError):
            layer.forward(Tensor([1.0, 2.0, 3.0]))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        layer = L.make_affine(rng, 4, 3, "tanh")
        xs = rng.uniform(-1, 1, size=(4, 5))
        batched = layer.forward(Tensor(xs)).array
        for j in range(5):
            single = layer.forward(Tensor(xs[:, j])).data
            npt.assert_allclose(single, batched[:, j], atol=1e-12)


def scalar_lstm_oracle(w, b, x, h0, c0):
    """Plain-float single-unit LSTM recurrence, independent of the engine."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    i = sig(w[0][0] * x + w[0][1] * h0 + b[0])
    f = sig(w[1][0] * x + w[1][1] * h0 + b[1])
    g = math.tanh(w[2][0] * x + w[2][1] * h0 + b[2])
    o = sig(w[3][0] * x + w[3][1] * h0 + b[3])
    c = f * c0 + i * g
    h = o * math.tanh(c)
    return h, c


class TestLstmCell:
    def test_zero_weights_zero_state(self):
        cell = L.LstmCell(Tensor(np.zeros((8, 5))), Tensor(np.zeros(8)), 3, 2)
        y, state = cell.step(Tensor([1.0, -2.0, 0.5]), L.LstmState.zeros(2))
        npt.assert_array_equal(y.data, [0.0, 0.0])
        npt.assert_array_equal(state.c.data, [0.0, 0.0])

    def test_scalar_oracle(self):
        w = [[0.5, -0.3], [0.2, 0.8], [-0.7, 0.4], [0.9, -0.1]]
        b = [0.1, 1.0, -0.2, 0.3]
        cell = L.LstmCell(Tensor(w), Tensor(b), 1, 1)
        h, c = 0.0, 0.0
        state = L.LstmState.zeros(1)
        for x in (0.7, -1.1, 0.25):
            y, state = cell.step(Tensor([x]), state)
            h, c = scalar_lstm_oracle(w, b, x, h, c)
            npt.assert_allclose(y.data, [h], rtol=1e-12)
            npt.assert_allclose(state.c.data, [c], rtol=1e-12)

    def test_cell_growth_bound(self):
        # f, i in (0,1) and g in (-1,1) give |c'| <= |c| + 1 componentwise
        rng = np.random.default_rng(1)
        cell = L.make_lstm(rng, 4, 3)
        state = L.LstmState(Tensor(rng.uniform(-3, 3, size=3)),
                            Tensor(rng.uniform(-3, 3, size=3)))
        for _ in range(20):
            x = Tensor(rng.uniform(-5, 5, size=4))
            _, new = cell.step(x, state)
            assert np.all(np.abs(new.c.data) <= np.abs(state.c.data) + 1.0)
            state = new

    def test_shape_mismatch(self):
        cell = L.LstmCell(Tensor(np.zeros((8, 5))), Tensor(np.zeros(8)), 3, 2)
        with pytest.raises(ShapeError):
            cell.step(Tensor([1.0, 2.0]), L.LstmState.zeros(2))


class TestLstmUnroll:
    def _random_cell_and_seq(self, rng, n, in_dim=4, h=3):
        cell = L.make_lstm(rng, in_dim, h)
        xs = [Tensor(rng.uniform(-1, 1, size=in_dim)) for _ in range(n)]
        return cell, xs

    def test_length_one_equals_step(self):
        rng = np.random.default_rng(2)
        cell, xs = self._random_cell_and_seq(rng, 1)
        ys, states = L.lstm_unroll(cell, xs, L.LstmState.zeros(3))
        y_direct, s_direct = cell.step(xs[0], L.LstmState.zeros(3))
        npt.assert_array_equal(ys[0].data, y_direct.data)
        npt.assert_array_equal(states[0].c.data, s_direct.c.data)

    def test_unroll_equals_streaming(self):
        rng = np.random.default_rng(3)
        for n in (2, 5, 32):
            cell, xs = self._random_cell_and_seq(rng, n)
            ys, states = L.lstm_unroll(cell, xs, L.LstmState.zeros(3))
            state = L.LstmState.zeros(3)
            for t in range(n):
                y, state = cell.step(xs[t], state)
                npt.assert_allclose(ys[t].data, y.data, atol=1e-12)
            npt.assert_allclose(states[-1].h.data, state.h.data, atol=1e-12)

    def test_composition_law(self):
        rng = np.random.default_rng(4)
        cell, xs = self._random_cell_and_seq(rng, 8)
        _, full = L.lstm_unroll(cell, xs, L.LstmState.zeros(3))
        _, first = L.lstm_unroll(cell, xs[:5], L.LstmState.zeros(3))
        _, second = L.lstm_unroll(cell, xs[5:], first[-1])
        npt.assert_allclose(full[-1].h.data, second[-1].h.data, atol=1e-12)
        npt.assert_allclose(full[-1].c.data, second[-1].c.data, atol=1e-12)

    def test_empty_rejected(self):
        rng = np.random.default_rng(5)
        cell, _ = self._random_cell_and_seq(rng, 1)
        with pytest.raises(ShapeError):
            L.lstm_unroll(cell, [], L.LstmState.zeros(3))


class TestInit:
    def test_same_seed_bit_identical(self):
        a = L.make_affine(L.derive_rng(7, "enc", 0), 10, 6, "tanh")
        b = L.make_affine(L.derive_rng(7, "enc", 0), 10, 6, "tanh")
        assert np.array_equal(a.weight.data, b.weight.data)

    def test_different_seeds_differ(self):
        a = L.make_affine(L.derive_rng(7, "enc", 0), 10, 6, "tanh")
        b = L.make_affine(L.derive_rng(8, "enc", 0), 10, 6, "tanh")
        assert not np.array_equal(a.weight.data, b.weight.data)

    def test_bounds_respected_exhaustive(self):
        for in_dim, out_dim in ((3, 5), (64, 32), (1, 1)):
            w = L.glorot_uniform(np.random.default_rng(9), out_dim, in_dim)
            bound = np.sqrt(6.0 / (in_dim + out_dim))
            assert np.all(w >= -bound) and np.all(w <= bound)

    def test_forget_gate_bias_one(self):
        cell = L.make_lstm(np.random.default_rng(10), 4, 3)
        b = cell.b.data
        npt.assert_array_equal(b[3:6], np.ones(3))
        npt.assert_array_equal(b[:3], np.zeros(3))
        npt.assert_array_equal(b[6:], np.zeros(6))

    def test_non_positive_dims_rejected(self):
        with pytest.raises(ShapeError):
            L.glorot_uniform(np.random.default_rng(0), 0, 4)


class TestStackAndRegistry:
    def test_encoder_latent_dim(self):
        enc = L.make_encoder(np.random.default_rng(11), [256, 128, 64])
        assert enc.latent_dim == 64 and enc.in_dim == 256

    def test_decoder_final_sigmoid(self):
        dec = L.make_decoder(np.random.default_rng(12), [64, 128, 256])
        assert dec.layers[-1].activation == "sigmoid"
        out = dec.forward(Tensor(np.random.default_rng(13).uniform(-1, 1, 64)))
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_registry_no_duplicates(self):
        enc = L.make_encoder(np.random.default_rng(14), [8, 4, 2])
        names = [n for n, _ in enc.parameters()]
        tensors = [id(p) for _, p in enc.parameters()]
        assert len(names) == len(set(names)) == 4
        assert len(tensors) == len(set(tensors))

    def test_two_layer_composition_gradcheck(self):
        rng = np.random.default_rng(15)
        stack = L.make_encoder(rng, [5, 4, 3], "tanh")
        params = [p for _, p in stack.parameters()]
        x = Tensor(rng.uniform(-1, 1, size=5))

        def loss(*ps):
            out = stack.forward(x)
            return T.tsum(T.mul(out, out))

        check_gradients(loss, params)

    def test_lstm_step_gradcheck(self):
        rng = np.random.default_rng(16)
        cell = L.make_lstm(rng, 3, 2)
        x = Tensor(rng.uniform(-1, 1, size=3), requires_grad=True)
        params = [cell.W, cell.b, x]

        def loss(*ps):
            y, state = cell.step(x, L.LstmState.zeros(2))
            return T.tsum(T.mul(y, y)) + T.tsum(T.mul(state.c, state.c))

        check_gradients(loss, params)
