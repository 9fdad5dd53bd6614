import numpy as np
import numpy.testing as npt
import pytest

from anclaf import layers as L
from anclaf import metrics as M
from anclaf import model as Mo
from anclaf import tensor as T
from anclaf.errors import ShapeError
from anclaf.metrics import AffectLabel
from anclaf.tensor import Tensor

ARCH = Mo.ArchConfig()


def tiny_arch():
    # small dims keep the forward-heavy tests quick
    return Mo.ArchConfig(image_dim=256, g_dims=(256, 32, 16), d_dims=(256, 16, 8),
                         c_frame_hidden=8, hidden_size=4)


def random_image(rng):
    return Tensor(rng.uniform(0, 1, size=256))


class TestQuadrantOf:
    @pytest.mark.parametrize("v,a,q", [
        (0.5, 0.5, 0), (-0.3, 0.2, 1), (-0.4, -0.9, 2), (0.7, -0.1, 3),
        (0.0, 0.0, 0), (0.0, -0.5, 3), (-0.5, 0.0, 1),
    ])
    def test_conventions(self, v, a, q):
        assert Mo.quadrant_of(AffectLabel(v, a)) == q

    def test_scaling_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            v, a = rng.uniform(-1, 1, 2)
            s = rng.uniform(0.01, 1.0)
            assert Mo.quadrant_of(AffectLabel(v, a)) == Mo.quadrant_of(AffectLabel(v * s, a * s))

    def test_non_finite_rejected(self):
        with pytest.raises(ShapeError):
            AffectLabel(float("nan"), 0.0)


class TestGenerator:
    def test_deterministic_without_distortion(self):
        rng = np.random.default_rng(1)
        g = Mo.build_generator(tiny_arch(), seed=3)
        img = random_image(rng)
        r1, z1 = Mo.generator_forward(g, img, distort=False)
        r2, z2 = Mo.generator_forward(g, img, distort=False)
        assert np.array_equal(r1.data, r2.data) and np.array_equal(z1.data, z2.data)

    def test_reconstruction_shape(self):
        g = Mo.build_generator(tiny_arch(), seed=3)
        img = random_image(np.random.default_rng(2))
        recon, z = Mo.generator_forward(g, img)
        assert recon.shape == img.shape and z.shape == (16,)

    def test_untrained_outputs_in_unit_interval(self):
        g = Mo.build_generator(tiny_arch(), seed=4)
        recon, _ = Mo.generator_forward(g, Tensor(np.full(256, 0.5)))
        assert np.all(recon.data > 0.0) and np.all(recon.data < 1.0)

    def test_distorted_path_differs(self):
        g = Mo.build_generator(tiny_arch(), seed=5)
        img = random_image(np.random.default_rng(3))
        clean, _ = Mo.generator_forward(g, img, distort=False)
        noisy, _ = Mo.generator_forward(g, img, distort=True,
                                        rng=np.random.default_rng(4))
        assert not np.array_equal(clean.data, noisy.data)


class TestDiscriminator:
    def test_q_probs_sum_to_one(self):
        d = Mo.build_discriminator(tiny_arch(), seed=6)
        out = Mo.discriminator_forward(d, random_image(np.random.default_rng(5)))
        assert abs(out.q_probs.data.sum() - 1.0) < 1e-12

    def test_p_real_strictly_inside(self):
        d = Mo.build_discriminator(tiny_arch(), seed=7)
        out = Mo.discriminator_forward(d, random_image(np.random.default_rng(6)))
        assert 0.0 < out.p_real.data[0] < 1.0

    def test_zero_weight_coin_flip(self):
        arch = tiny_arch()
        d = Mo.build_discriminator(arch, seed=8)
        for _, p in d.parameters():
            p.array[...] = 0.0
        out = Mo.discriminator_forward(d, random_image(np.random.default_rng(7)))
        npt.assert_allclose(out.p_real.data, [0.5], atol=1e-15)
        npt.assert_allclose(out.q_probs.data, np.full(4, 0.25), atol=1e-15)

    def test_batched_matches_single(self):
        d = Mo.build_discriminator(tiny_arch(), seed=9)
        imgs = np.random.default_rng(8).uniform(0, 1, size=(256, 3))
        batch = Mo.discriminator_forward(d, Tensor(imgs))
        for j in range(3):
            single = Mo.discriminator_forward(d, Tensor(imgs[:, j]))
            npt.assert_allclose(single.q_probs.data, batch.q_probs.array[:, j], atol=1e-12)
            npt.assert_allclose(single.p_real.data, batch.p_real.array[:, j], atol=1e-12)


class TestMakeZq:
    def test_length_law(self):
        z = Tensor(np.zeros(64))
        q = Tensor(np.full(4, 0.25))
        assert Mo.make_zq(z, q).zq.shape == (68,)

    def test_index_oracle(self):
        feat = Mo.make_zq(Tensor([1.0, 2.0]), Tensor([0.7, 0.1, 0.1, 0.1]))
        npt.assert_array_equal(feat.zq.data, [1.0, 2.0, 0.7, 0.1, 0.1, 0.1])

    def test_roundtrip_split(self):
        rng = np.random.default_rng(9)
        z = Tensor(rng.normal(size=5))
        q = Tensor(rng.dirichlet(np.ones(4)))
        feat = Mo.make_zq(z, q)
        npt.assert_array_equal(T.narrow(feat.zq, 0, 0, 5).data, z.data)
        npt.assert_array_equal(T.narrow(feat.zq, 0, 5, 4).data, q.data)

    def test_hard_onehot(self):
        feat = Mo.make_zq(Tensor([1.0]), Tensor([0.2, 0.5, 0.2, 0.1]), hard_onehot=True)
        npt.assert_array_equal(feat.q.data, [0.0, 1.0, 0.0, 0.0])


class TestAnclafForward:
    def test_deterministic_and_two_outputs(self):
        model = Mo.build_model(tiny_arch(), "frame", 1, seed=11)
        img = random_image(np.random.default_rng(10))
        p1, feat = Mo.anclaf_forward(model, img)
        p2, _ = Mo.anclaf_forward(model, img)
        assert p1.shape == (2,)
        assert np.array_equal(p1.data, p2.data)
        assert feat.zq.shape == (tiny_arch().zq_dim,)

    def test_zero_weight_head_predicts_origin(self):
        model = Mo.build_model(tiny_arch(), "frame", 1, seed=12)
        model.combiner.head.weight.array[...] = 0.0
        model.combiner.head.bias.array[...] = 0.0
        pred, _ = Mo.anclaf_forward(model, random_image(np.random.default_rng(11)))
        npt.assert_array_equal(pred.data, [0.0, 0.0])

    def test_wrong_variant_rejected(self):
        model = Mo.build_model(tiny_arch(), "sequence", 4, seed=13)
        with pytest.raises(ShapeError):
            Mo.anclaf_forward(model, random_image(np.random.default_rng(12)))


def random_zq_seq(rng, n, dim=68, batch=None):
    shape = (dim,) if batch is None else (dim, batch)
    return [Tensor(rng.uniform(-1, 1, size=shape)) for _ in range(n)]


class TestSequenceForward:
    def test_length_one_degenerates_to_step(self):
        arch = Mo.ArchConfig()
        c = Mo.build_combiner(arch, "sequence", 1, seed=14)
        zq = random_zq_seq(np.random.default_rng(13), 1)
        preds, states = Mo.anclaf_s_forward(c, zq, 1)
        y, state = c.lstm.step(zq[0], L.LstmState.zeros(arch.hidden_size))
        npt.assert_array_equal(preds[0].data, c.head.forward(y).data)
        npt.assert_array_equal(states[0].c.data, state.c.data)

    def test_streaming_oracle(self):
        arch = Mo.ArchConfig()
        c = Mo.build_combiner(arch, "sequence", 8, seed=15)
        zq = random_zq_seq(np.random.default_rng(14), 8)
        preds, _ = Mo.anclaf_s_forward(c, zq, 8)
        state = L.LstmState.zeros(arch.hidden_size)
        for t in range(8):
            y, state = c.lstm.step(zq[t], state)
            npt.assert_allclose(preds[t].data, c.head.forward(y).data, atol=1e-12)

    def test_prediction_count(self):
        for n in (2, 4, 8, 16, 32):
            c = Mo.build_combiner(Mo.ArchConfig(), "sequence", n, seed=16)
            preds, states = Mo.anclaf_s_forward(
                c, random_zq_seq(np.random.default_rng(n), n), n)
            assert len(preds) == n and len(states) == n
            assert all(p.shape == (2,) for p in preds)

    def test_length_mismatch(self):
        c = Mo.build_combiner(Mo.ArchConfig(), "sequence", 4, seed=17)
        with pytest.raises(ShapeError):
            Mo.anclaf_s_forward(c, random_zq_seq(np.random.default_rng(15), 3), 4)


class TestAttentionForward:
    def test_first_frame_has_no_weights(self):
        c = Mo.build_combiner(Mo.ArchConfig(), "sequence_attention", 8, seed=18)
        preds, states, weights = Mo.anclaf_sa_forward(
            c, random_zq_seq(np.random.default_rng(16), 8), 8)
        assert weights[0] is None
        for t in range(1, 8):
            assert weights[t].shape == (t,)
            assert abs(weights[t].data.sum() - 1.0) < 1e-12

    def test_zero_context_columns_match_sequence_variant(self):
        arch = Mo.ArchConfig()
        for n in (2, 4, 8):
            s_model = Mo.build_model(arch, "sequence", n, seed=19)
            sa_model = Mo.widen_sequence_to_attention(s_model, seed=20)
            zq = random_zq_seq(np.random.default_rng(n + 17), n)
            s_preds, _ = Mo.anclaf_s_forward(s_model.combiner, zq, n)
            sa_preds, _, _ = Mo.anclaf_sa_forward(sa_model.combiner, zq, n)
            for a, b in zip(s_preds, sa_preds):
                npt.assert_allclose(a.data, b.data, atol=1e-12)

    def test_widened_input_dimension(self):
        arch = Mo.ArchConfig()
        s_model = Mo.build_model(arch, "sequence", 8, seed=21)
        sa_model = Mo.widen_sequence_to_attention(s_model, seed=22)
        assert sa_model.combiner.lstm.input_size == arch.zq_dim + 2 * arch.hidden_size

    def test_gradients_reach_all_combiner_params(self):
        T.reset_graph()
        arch = Mo.ArchConfig()
        c = Mo.build_combiner(arch, "sequence_attention", 4, seed=23)
        rng = np.random.default_rng(18)
        zq = random_zq_seq(rng, 4)
        preds, _, _ = Mo.anclaf_sa_forward(c, zq, 4)
        truths = rng.uniform(-1, 1, size=(4, 2))
        pv = T.concat([T.narrow(p, 0, 0, 1) for p in preds], axis=0)
        pa = T.concat([T.narrow(p, 0, 1, 1) for p in preds], axis=0)
        loss = M.affect_loss(pv, pa, truths, M.class_weights(truths))
        T.backward(loss)
        for name, p in c.parameters():
            assert p.grad is not None, name
        T.reset_graph()

    def test_param_shapes_length_independent(self):
        arch = Mo.ArchConfig()
        shapes = []
        for n in (2, 4, 8, 16, 32):
            m = Mo.build_model(arch, "sequence_attention", n, seed=24)
            shapes.append([(name, p.shape) for name, p in m.parameters()])
        assert all(s == shapes[0] for s in shapes)

    def test_batched_matches_single(self):
        arch = Mo.ArchConfig(hidden_size=4, g_dims=(256, 16, 8), d_dims=(256, 16, 8))
        c = Mo.build_combiner(arch, "sequence_attention", 4, seed=25)
        rng = np.random.default_rng(19)
        zq_b = [rng.uniform(-1, 1, size=(12, 3)) for _ in range(4)]
        preds_b, _, _ = Mo.anclaf_sa_forward(c, [Tensor(z) for z in zq_b], 4)
        for j in range(3):
            preds_s, _, _ = Mo.anclaf_sa_forward(
                c, [Tensor(z[:, j]) for z in zq_b], 4)
            for t in range(4):
                npt.assert_allclose(preds_s[t].data, preds_b[t].array[:, j], atol=1e-10)


class TestRegistry:
    def test_unique_parameter_names_and_objects(self):
        model = Mo.build_model(Mo.ArchConfig(), "sequence_attention", 8, seed=26)
        named = model.parameters()
        names = [n for n, _ in named]
        ids = [id(p) for _, p in named]
        assert len(names) == len(set(names))
        assert len(ids) == len(set(ids))
