import math

import numpy as np
import pytest

from fedgram.model import (
    DECISION,
    REPRESENTATION,
    MlpArch,
    MlpModel,
    ParamVector,
    Segment,
    ce_loss_grad,
    forward_embed,
    forward_logits,
    init_model,
    predict,
    sgd_local_train,
    softmax,
    uniformity_loss_grad,
)

from oracles import finite_difference_max_rel_error, mlp_forward

SMALL = MlpArch(input_dim=4, hidden_dims=(5,), embedding_dim=3, num_classes=3)


def random_model(arch, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return MlpModel.from_values(arch, rng.normal(scale=scale, size=arch.num_params))


def nested_layers(model):
    return [(W.tolist(), b.tolist()) for W, b, _ in model.layers()]


class TestArchitecture:
    def test_param_count(self):
        arch = MlpArch(20, (32,), 16, 10)
        assert arch.num_params == 20 * 32 + 32 + 32 * 16 + 16 + 16 * 10 + 10

    def test_segments_partition(self):
        segs = SMALL.segments()
        assert segs[0].start == 0
        assert all(a.stop == b.start for a, b in zip(segs, segs[1:]))
        assert segs[-1].stop == SMALL.num_params
        assert [s.role for s in segs[-2:]] == [DECISION, DECISION]

    def test_rejects_zero_width(self):
        with pytest.raises(ValueError):
            MlpArch(4, (0,), 3, 3)

    def test_decision_before_representation_rejected(self):
        segs = (Segment("a", 0, 2, DECISION), Segment("b", 2, 2, REPRESENTATION))
        with pytest.raises(ValueError, match="precede"):
            ParamVector(np.zeros(4), segs)

    def test_gap_rejected(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(4), (Segment("a", 0, 1, REPRESENTATION), Segment("b", 2, 2, DECISION)))


class TestSerialization:
    def test_roundtrip_bit_exact(self):
        m = random_model(SMALL, 1)
        m.values[0] = -0.0
        m.values[1] = 1e-310
        blob = m.params.to_bytes()
        back = ParamVector.from_bytes(blob)
        assert back.values.tobytes() == m.values.tobytes()
        assert back.segments == m.params.segments
        x = np.linspace(-1, 1, 4)
        assert forward_logits(MlpModel(SMALL, back), x).tobytes() == forward_logits(m, x).tobytes()

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            ParamVector.from_bytes(b"XXXX" + bytes(20))

    def test_truncated(self):
        blob = random_model(SMALL, 2).params.to_bytes()
        with pytest.raises(ValueError):
            ParamVector.from_bytes(blob[:-8])


class TestForward:
    def test_zero_model(self):
        z = MlpModel.zeros(SMALL)
        np.testing.assert_array_equal(forward_embed(z, np.ones(4)), np.zeros(3))
        np.testing.assert_array_equal(forward_logits(z, np.ones(4)), np.zeros(3))
        np.testing.assert_allclose(softmax(forward_logits(z, np.ones(4))), np.full(3, 1 / 3), atol=1e-15)

    def test_identity_construction(self):
        arch = MlpArch(3, (), 3, 2)
        v = np.zeros(arch.num_params)
        v[:9] = np.eye(3).ravel()
        m = MlpModel.from_values(arch, v)
        x = np.array([0.5, 2.0, 0.0])
        np.testing.assert_array_equal(forward_embed(m, x), x)

    def test_decision_bias_only(self):
        v = np.zeros(SMALL.num_params)
        v[-3:] = [1.0, 0.0, 0.0]
        m = MlpModel.from_values(SMALL, v)
        for x in np.random.default_rng(0).normal(size=(5, 4)):
            np.testing.assert_array_equal(forward_logits(m, x), [1.0, 0.0, 0.0])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_matmul_oracle(self, seed):
        arch = MlpArch(4, (6, 5), 3, 3)
        m = random_model(arch, seed)
        x = np.random.default_rng(seed + 100).normal(size=4)
        emb, logits = mlp_forward(nested_layers(m), x.tolist())
        np.testing.assert_allclose(forward_embed(m, x), emb, atol=1e-12, rtol=0)
        np.testing.assert_allclose(forward_logits(m, x), logits, atol=1e-12, rtol=0)

    def test_batch_matches_single(self):
        m = random_model(SMALL, 5)
        X = np.random.default_rng(5).normal(size=(7, 4))
        batch = forward_logits(m, X)
        for i in range(7):
            np.testing.assert_allclose(batch[i], forward_logits(m, X[i]), atol=1e-14)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            forward_embed(MlpModel.zeros(SMALL), np.ones(5))
        with pytest.raises(ValueError, match="dimension"):
            forward_logits(MlpModel.zeros(SMALL), np.ones(3))

    def test_softmax_sums_to_one(self):
        L = np.random.default_rng(9).normal(scale=30, size=(50, 10))
        np.testing.assert_allclose(softmax(L).sum(axis=1), 1.0, atol=1e-12)

    def test_predict_ties_low_index(self):
        assert predict(MlpModel.zeros(SMALL), np.ones((2, 4))).tolist() == [0, 0]


class TestCrossEntropy:
    def test_zero_model_ln_k(self):
        loss, _ = ce_loss_grad(MlpModel.zeros(SMALL), np.ones((4, 4)), [0, 1, 2, 0])
        assert loss == pytest.approx(math.log(3), abs=1e-15)

    @pytest.mark.parametrize("seed", [11, 12, 13])
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        m = random_model(SMALL, seed, scale=0.7)
        X = rng.normal(size=(5, 4))
        y = rng.integers(0, 3, size=5)
        _, g = ce_loss_grad(m, X, y)
        err = finite_difference_max_rel_error(lambda v: ce_loss_grad(m.with_values(v), X, y)[0], m.values, g)
        assert err <= 1e-4

    def test_duplicated_batch(self):
        rng = np.random.default_rng(4)
        m = random_model(SMALL, 4)
        X = rng.normal(size=(3, 4))
        y = np.array([0, 2, 1])
        l1, g1 = ce_loss_grad(m, X, y)
        l2, g2 = ce_loss_grad(m, np.vstack([X, X]), np.concatenate([y, y]))
        assert l1 == pytest.approx(l2, abs=1e-14)
        np.testing.assert_allclose(g1, g2, atol=1e-14)

    def test_errors(self):
        m = MlpModel.zeros(SMALL)
        with pytest.raises(ValueError, match="empty batch"):
            ce_loss_grad(m, np.zeros((0, 4)), [])
        with pytest.raises(ValueError, match="label"):
            ce_loss_grad(m, np.zeros((1, 4)), [3])


class TestUniformity:
    def test_identical_samples(self):
        loss, _ = uniformity_loss_grad(random_model(SMALL, 3), np.ones((4, 4)))
        assert loss == 0.0

    def test_single_pair_distance_one(self):
        arch = MlpArch(2, (), 2, 2)
        v = np.zeros(arch.num_params)
        v[:4] = np.eye(2).ravel()
        m = MlpModel.from_values(arch, v)
        loss, _ = uniformity_loss_grad(m, [[0.0, 0.0], [1.0, 0.0]])
        assert loss == pytest.approx(-1.0, abs=1e-15)

    @pytest.mark.parametrize("seed", [21, 22, 23])
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        m = random_model(SMALL, seed, scale=0.5)
        X = rng.normal(size=(5, 4))
        _, g = uniformity_loss_grad(m, X)
        err = finite_difference_max_rel_error(lambda v: uniformity_loss_grad(m.with_values(v), X)[0], m.values, g)
        assert err <= 1e-4

    def test_decision_gradient_exactly_zero(self):
        m = random_model(SMALL, 8)
        _, g = uniformity_loss_grad(m, np.random.default_rng(8).normal(size=(6, 4)))
        assert np.all(g[m.params.decision_slice()] == 0.0)
        assert np.any(g[m.params.role_mask(REPRESENTATION)] != 0.0)

    def test_needs_two(self):
        with pytest.raises(ValueError, match="at least 2"):
            uniformity_loss_grad(MlpModel.zeros(SMALL), np.ones((1, 4)))


class TestSgd:
    def test_zero_steps(self):
        m = random_model(SMALL, 1)
        out = sgd_local_train(m, np.ones((3, 4)), [0, 1, 2], 0, 0.1, 2, np.random.default_rng(0))
        assert out.values.tobytes() == m.values.tobytes()

    def test_one_full_batch_step(self):
        m = random_model(SMALL, 2)
        X = np.random.default_rng(2).normal(size=(4, 4))
        y = np.array([0, 1, 2, 1])
        _, g = ce_loss_grad(m, X, y)
        before = m.values.copy()
        out = sgd_local_train(m, X, y, 1, 0.1, 32, np.random.default_rng(0))
        np.testing.assert_allclose(out.values, before - 0.1 * g, atol=1e-15)
        assert m.values.tobytes() == before.tobytes()

    def test_empty(self):
        with pytest.raises(ValueError, match="client has no data"):
            sgd_local_train(MlpModel.zeros(SMALL), np.zeros((0, 4)), [], 1, 0.1, 2, np.random.default_rng(0))

    def test_deterministic(self):
        m = random_model(SMALL, 3)
        X = np.random.default_rng(3).normal(size=(20, 4))
        y = np.arange(20) % 3
        a = sgd_local_train(m, X, y, 7, 0.05, 4, np.random.default_rng(42))
        b = sgd_local_train(m, X, y, 7, 0.05, 4, np.random.default_rng(42))
        assert a.values.tobytes() == b.values.tobytes()

    def test_separable_loss_decreases(self):
        rng = np.random.default_rng(0)
        arch = MlpArch(2, (8,), 4, 2)
        X = np.vstack([rng.normal(loc=(-3, 0), size=(32, 2)), rng.normal(loc=(3, 0), size=(32, 2))])
        y = np.repeat([0, 1], 32)
        model = init_model(arch, np.random.default_rng(1))
        step_rng = np.random.default_rng(2)
        epoch_losses = []
        # 8 batches of 8 per epoch; train 50 epochs one step at a time
        for _ in range(50):
            batch_losses = []
            for _ in range(8):
                model_before = model
                model = sgd_local_train(model, X, y, 1, 0.05, 8, step_rng)
                batch_losses.append(ce_loss_grad(model_before, X, y)[0])
            epoch_losses.append(np.mean(batch_losses))
        assert all(b < a for a, b in zip(epoch_losses, epoch_losses[1:]))

    def test_init_bounds(self):
        arch = MlpArch(20, (32,), 16, 10)
        m = init_model(arch, np.random.default_rng(0))
        for (W, b, _), (fi, fo, _) in zip(m.layers(), arch.layer_dims):
            assert np.all(np.abs(W) <= math.sqrt(6 / (fi + fo)))
            assert np.all(b == 0)
