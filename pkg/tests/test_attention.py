import numpy as np
import numpy.testing as npt
import pytest

from anclaf import attention as A
from anclaf import tensor as T
from anclaf.errors import ShapeError
from anclaf.layers import LstmState
from anclaf.tensor import Tensor

from gradcheck import check_gradients


def window_of(states, max_size=32):
    w = A.StateWindow(max_size)
    for s in states:
        w.push(Tensor(s))
    return w


class TestCombinedState:
    def test_index_oracle(self):
        state = LstmState(Tensor([1.0]), Tensor([2.0]))
        npt.assert_array_equal(A.combined_state(state).data, [1.0, 2.0])

    def test_zero_state(self):
        state = LstmState.zeros(3)
        npt.assert_array_equal(A.combined_state(state).data, np.zeros(6))

    def test_length_law(self):
        for h in (1, 4, 32):
            state = LstmState.zeros(h)
            assert A.combined_state(state).shape == (2 * h,)


class TestAlignment:
    def _params(self, h, mode="concat", w=None):
        width = 4 * h if mode == "concat" else 2 * h
        if w is None:
            w = np.zeros((1, width))
        return A.AttentionParams(Tensor(w, requires_grad=True), mode, h)

    def test_zero_weights_uniform(self):
        rng = np.random.default_rng(0)
        win = window_of([rng.normal(size=4) for _ in range(5)])
        weights = A.alignment(self._params(2), Tensor(rng.normal(size=4)), win)
        npt.assert_allclose(weights.data, np.full(5, 0.2), atol=1e-15)

    def test_singleton_window(self):
        win = window_of([np.ones(4)])
        weights = A.alignment(self._params(2), Tensor(np.ones(4)), win)
        npt.assert_array_equal(weights.data, [1.0])

    def test_hand_set_log_scores(self):
        # location scorer picks out the first entry; states encode ln1 and ln3
        h = 1
        w = np.array([[1.0, 0.0]])
        win = window_of([np.array([np.log(1.0), 0.0]), np.array([np.log(3.0), 0.0])])
        weights = A.alignment(self._params(h, "location", w), Tensor(np.zeros(2)), win)
        npt.assert_allclose(weights.data, [0.25, 0.75], rtol=1e-12)

    def test_sums_to_one(self):
        rng = np.random.default_rng(1)
        p = self._params(3, w=rng.normal(size=(1, 12)))
        for k in (1, 2, 7):
            win = window_of([rng.normal(size=6) for _ in range(k)])
            weights = A.alignment(p, Tensor(rng.normal(size=6)), win)
            assert abs(weights.data.sum() - 1.0) < 1e-12
            assert np.all(weights.data >= 0.0)

    def test_empty_window_rejected(self):
        with pytest.raises(ShapeError):
            A.alignment(self._params(2), Tensor(np.zeros(4)), A.StateWindow(4))

    def test_location_mode_permutation_equivariant(self):
        rng = np.random.default_rng(2)
        p = self._params(2, "location", rng.normal(size=(1, 4)))
        states = [rng.normal(size=4) for _ in range(5)]
        cur = Tensor(rng.normal(size=4))
        base = A.alignment(p, cur, window_of(states)).data
        perm = [3, 0, 4, 1, 2]
        permuted = A.alignment(p, cur, window_of([states[i] for i in perm])).data
        npt.assert_allclose(permuted, base[perm], atol=1e-12)

    def test_param_count_independent_of_window(self):
        p = self._params(32)
        sizes = set()
        for n in (2, 4, 8, 16, 32):
            sizes.add(sum(t.size for _, t in p.parameters()))
        assert sizes == {4 * 32}


class TestContextVector:
    def test_single_state_identity(self):
        v = np.array([0.5, -1.5])
        win = window_of([v])
        ctx = A.context_vector(Tensor([1.0]), win)
        npt.assert_allclose(ctx.data, v, rtol=1e-15)

    def test_uniform_over_identical_states_shrinks_by_k(self):
        # softmax already normalizes; the extra 1/k shrinkage is intentional
        v = np.array([2.0, -4.0, 1.0, 1.0])
        k = 4
        win = window_of([v] * k)
        ctx = A.context_vector(Tensor(np.full(k, 1.0 / k)), win)
        npt.assert_allclose(ctx.data, v / k, rtol=1e-12)

    def test_zero_window_zero_context(self):
        win = window_of([np.zeros(4), np.zeros(4)])
        ctx = A.context_vector(Tensor([0.3, 0.7]), win)
        npt.assert_array_equal(ctx.data, np.zeros(4))

    def test_division_flag(self):
        v = np.array([1.0, 3.0])
        win = window_of([v, v])
        with_div = A.context_vector(Tensor([0.5, 0.5]), win, divide_by_count=True)
        without = A.context_vector(Tensor([0.5, 0.5]), win, divide_by_count=False)
        npt.assert_allclose(without.data, 2 * with_div.data, rtol=1e-15)
        npt.assert_allclose(without.data, v, rtol=1e-15)

    def test_length_mismatch(self):
        win = window_of([np.zeros(4)])
        with pytest.raises(ShapeError):
            A.context_vector(Tensor([0.5, 0.5]), win)

    def test_summation_oracle_random(self):
        rng = np.random.default_rng(3)
        states = [rng.normal(size=6) for _ in range(5)]
        weights = rng.dirichlet(np.ones(5))
        win = window_of(states)
        ctx = A.context_vector(Tensor(weights), win).data
        expected = sum(w * s for w, s in zip(weights, states)) / 5
        npt.assert_allclose(ctx, expected, rtol=1e-12)


class TestAttendAndAugment:
    def _setup(self, h=2, zq_dim=3, mode="concat", seed=4):
        rng = np.random.default_rng(seed)
        params = A.make_attention(rng, h, mode)
        zq = Tensor(rng.normal(size=zq_dim))
        state = LstmState(Tensor(rng.normal(size=h)), Tensor(rng.normal(size=h)))
        return params, zq, state

    def test_empty_window_zero_context(self):
        params, zq, state = self._setup()
        aug, weights = A.attend_and_augment(params, zq, state, A.StateWindow(8))
        assert weights is None
        npt.assert_array_equal(aug.data[:4], np.zeros(4))
        npt.assert_array_equal(aug.data[4:], zq.data)

    def test_zero_scorer_gives_scaled_mean(self):
        h = 2
        params = A.AttentionParams(Tensor(np.zeros((1, 4 * h))), "concat", h)
        rng = np.random.default_rng(5)
        states = [rng.normal(size=2 * h) for _ in range(4)]
        win = window_of(states)
        zq = Tensor(rng.normal(size=3))
        state = LstmState(Tensor(rng.normal(size=h)), Tensor(rng.normal(size=h)))
        aug, weights = A.attend_and_augment(params, zq, state, win)
        expected_ctx = np.mean(states, axis=0) / 4
        npt.assert_allclose(aug.data[:4], expected_ctx, rtol=1e-12)
        npt.assert_allclose(weights.data, np.full(4, 0.25), atol=1e-15)

    def test_output_length_law(self):
        params, zq, state = self._setup(h=3, zq_dim=5)
        win = window_of([np.zeros(6)])
        aug, _ = A.attend_and_augment(params, zq, state, win)
        assert aug.shape == (2 * 3 + 5,)

    def test_state_shape_mismatch_rejected(self):
        win = A.StateWindow(4)
        win.push(Tensor(np.zeros(4)))
        with pytest.raises(ShapeError):
            win.push(Tensor(np.zeros(6)))

    def test_batched_matches_single(self):
        rng = np.random.default_rng(6)
        h, zq_dim, b = 2, 3, 4
        params = A.make_attention(rng, h, "concat")
        states = [rng.normal(size=(2 * h, b)) for _ in range(3)]
        zq = rng.normal(size=(zq_dim, b))
        hmat, cmat = rng.normal(size=(h, b)), rng.normal(size=(h, b))
        win_b = A.StateWindow(8)
        for s in states:
            win_b.push(Tensor(s))
        aug_b, w_b = A.attend_and_augment(
            params, Tensor(zq), LstmState(Tensor(hmat), Tensor(cmat)), win_b)
        for j in range(b):
            win_s = A.StateWindow(8)
            for s in states:
                win_s.push(Tensor(s[:, j]))
            aug_s, w_s = A.attend_and_augment(
                params, Tensor(zq[:, j]), LstmState(Tensor(hmat[:, j]), Tensor(cmat[:, j])),
                win_s)
            npt.assert_allclose(aug_s.data, aug_b.array[:, j], atol=1e-12)
            npt.assert_allclose(w_s.data, w_b.array[j], atol=1e-12)

    def test_gradients_flow_through_attention(self):
        rng = np.random.default_rng(7)
        h = 2
        params = A.make_attention(rng, h, "concat")
        state_arrays = [rng.normal(size=2 * h) for _ in range(3)]
        zq = Tensor(rng.normal(size=3), requires_grad=True)
        cur = LstmState(Tensor(rng.normal(size=h)), Tensor(rng.normal(size=h)))

        def loss(w, zq):
            win = A.StateWindow(8)
            for s in state_arrays:
                win.push(Tensor(s))
            aug, _ = A.attend_and_augment(params, zq, cur, win)
            return T.tsum(T.mul(aug, aug))

        check_gradients(loss, [params.w, zq])
