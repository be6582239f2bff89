import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adafuse import numerics as nx
from adafuse.exceptions import ConfigError, ContractViolation, NonFiniteError, ShapeError
from adafuse.model import FusionConfig, fuse_backward, fuse_forward_batch, init_params
from adafuse.synthgen import GenConfig, generate_corpus, generate_dialogues
from adafuse.training import Adam, TrainConfig, fit_arrays, info_nce_loss, train

from oracles import central_difference, max_relative_error, unit_rows

LN_1P_EXP_NEG1 = 0.31326168751822286  # ln(1 + e^-1)

SMALL = FusionConfig(d=8, d_proj=8, d_mid=4, d_hidden=8, n_experts=2, d_router=4)


class TestInfoNCE:
    def test_closed_form_two_orthonormal_rows(self):
        E = np.eye(2)
        loss, _, _ = info_nce_loss(E, E, 1.0)
        assert loss == pytest.approx(LN_1P_EXP_NEG1, abs=1e-12)

    def test_identical_rows_give_log_batch(self):
        Z = np.tile(np.array([0.6, 0.8]), (5, 1))
        loss, _, _ = info_nce_loss(Z, Z, 0.07)
        assert abs(loss - math.log(5)) < 1e-5

    def test_errors(self):
        with pytest.raises(ConfigError):
            info_nce_loss(np.eye(2)[:1], np.eye(2)[:1], 0.07)
        with pytest.raises(ContractViolation):
            info_nce_loss(2 * np.eye(2), np.eye(2), 0.07)
        with pytest.raises(ShapeError):
            info_nce_loss(np.eye(3), np.eye(2), 0.07)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**32 - 1), st.floats(0.05, 2.0))
    def test_nonnegative_and_permutation_invariant(self, B, seed, tau):
        rng = np.random.default_rng(seed)
        Zq, Zt = unit_rows(rng, B, 5), unit_rows(rng, B, 5)
        loss, _, _ = info_nce_loss(Zq, Zt, tau)
        perm = rng.permutation(B)
        assert loss >= 0
        assert abs(info_nce_loss(Zq[perm], Zt[perm], tau)[0] - loss) < 1e-6

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        Zq, Zt = unit_rows(rng, 4, 8), unit_rows(rng, 4, 8)
        with nx.float64_mode():
            _, gq, gt = info_nce_loss(Zq, Zt, 0.5)
        # differentiate the similarity logits directly, so unit-norm checks are bypassed
        def loss_raw():
            S = Zq @ Zt.T / 0.5
            row = np.log(np.exp(S).sum(axis=1)) - np.diag(S)
            col = np.log(np.exp(S).sum(axis=0)) - np.diag(S)
            return 0.5 * (row.mean() + col.mean())
        assert max_relative_error(gq, central_difference(loss_raw, Zq)) < 1e-3
        assert max_relative_error(gt, central_difference(loss_raw, Zt)) < 1e-3


class TestAdam:
    def test_zero_gradients_leave_params(self, tiny_config):
        params = init_params(tiny_config, 0)
        before = params.copy()
        opt = Adam(lr=1e-2)
        opt.step(params, {n: np.zeros_like(t) for n, t in params.tensors.items()})
        for n in params.tensors:
            np.testing.assert_array_equal(params[n], before[n])
            assert not opt.m[n].any()
        assert params.step == 1

    def test_first_step_matches_hand_computation(self, tiny_config):
        # step 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
        params = init_params(tiny_config, 0)
        before = params.copy()
        g = {n: np.full(t.shape, 0.3, dtype=np.float32) for n, t in params.tensors.items()}
        Adam(lr=0.01, clip_norm=0.0).step(params, g)
        delta = 0.01 * 0.3 / (0.3 + 1e-8)
        for n in params.tensors:
            np.testing.assert_allclose(params[n], before[n].astype(np.float64) - delta, atol=1e-7)

    def test_clip_zero_is_unclipped_path(self, tiny_config):
        rng = np.random.default_rng(1)
        g = {n: rng.normal(size=t.shape).astype(np.float32) for n, t in init_params(tiny_config, 0).tensors.items()}
        a, b = init_params(tiny_config, 0), init_params(tiny_config, 0)
        Adam(lr=0.01, clip_norm=0.0).step(a, g)
        Adam(lr=0.01, clip_norm=1e9).step(b, g)
        for n in a.tensors:
            assert a[n].tobytes() == b[n].tobytes()

    def test_clipping_scales_global_norm(self, tiny_config):
        params = init_params(tiny_config, 0)
        g = {n: np.full(t.shape, 10.0, dtype=np.float32) for n, t in params.tensors.items()}
        opt = Adam(lr=0.01, clip_norm=1.0)
        total = opt.step(params, g)
        assert total == pytest.approx(10.0 * math.sqrt(params.n_params()), rel=1e-6)
        # after one step m = 0.1 * clipped gradient
        moment_norm = math.sqrt(sum(float(np.sum((m / 0.1) ** 2)) for m in opt.m.values()))
        assert moment_norm == pytest.approx(1.0, rel=1e-6)

    def test_nan_gradient_names_tensor(self, tiny_config):
        params = init_params(tiny_config, 0)
        g = {n: np.zeros_like(t) for n, t in params.tensors.items()}
        g["router.W2"][0, 0] = np.nan
        with pytest.raises(NonFiniteError, match="router.W2"):
            Adam().step(params, g)


def _toy_rows(seed, n=64):
    rng = np.random.default_rng(seed)
    targets = unit_rows(rng, n, 8)
    zt = targets + rng.normal(scale=0.4, size=targets.shape)
    zd = targets + rng.normal(scale=0.4, size=targets.shape)
    return nx.l2_normalize(zt), nx.l2_normalize(zd), targets


class TestTrain:
    def test_zero_learning_rate_keeps_init(self):
        zt, zd, y = _toy_rows(0)
        params, curve = fit_arrays(zt, zd, y, SMALL, TrainConfig(learning_rate=0.0, epochs=2, batch_size=16, seed=3))
        ref = init_params(SMALL, 3)
        for n in ref.tensors:
            assert params[n].tobytes() == ref[n].tobytes()
        assert len(curve) == 2

    def test_loss_decreases_on_toy_set(self):
        decreased = 0
        for seed in range(5):
            zt, zd, y = _toy_rows(seed)
            _, curve = fit_arrays(zt, zd, y, SMALL, TrainConfig(epochs=20, batch_size=16, learning_rate=3e-3, seed=seed))
            decreased += curve[-1] < curve[0]
        assert decreased >= 4

    def test_same_seed_bit_identical(self):
        zt, zd, y = _toy_rows(1)
        tc = TrainConfig(epochs=3, batch_size=16, seed=5)
        a, ca = fit_arrays(zt, zd, y, SMALL, tc)
        b, cb = fit_arrays(zt, zd, y, SMALL, tc)
        assert ca == cb
        for n in a.tensors:
            assert a[n].tobytes() == b[n].tobytes()

    def test_on_epoch_callback(self):
        zt, zd, y = _toy_rows(2)
        seen = []
        fit_arrays(zt, zd, y, SMALL, TrainConfig(epochs=2, batch_size=32),
                   on_epoch=lambda e, loss, p, ms: seen.append((e, loss, p.step)))
        assert [e for e, _, _ in seen] == [1, 2]
        assert seen[-1][2] == 4

    def test_dimension_mismatch_is_config_error(self):
        zt, zd, y = _toy_rows(0)
        with pytest.raises(ConfigError):
            fit_arrays(zt, zd, y, FusionConfig(d=4), TrainConfig(epochs=1))
        with pytest.raises(ConfigError):
            fit_arrays(zt, zd[:10], y, SMALL, TrainConfig(epochs=1))

    def test_train_on_dialogues(self):
        gc = GenConfig(corpus_size=50, dim=8, dialogues=6, rounds=3, seed=0)
        _, corpus = generate_corpus(gc)
        data = generate_dialogues(gc, corpus)
        params, curve = train(data, corpus, SMALL, TrainConfig(epochs=2, batch_size=8))
        assert len(curve) == 2 and all(np.isfinite(curve))
        assert params.step == 2 * math.ceil(18 / 8)
        with pytest.raises(ConfigError):
            train([], corpus, SMALL, TrainConfig())

    @pytest.mark.parametrize("kwargs", [{"temperature": 0}, {"batch_size": 1}, {"epochs": -1},
                                        {"learning_rate": -1}, {"beta1": 1.0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_end_to_end_pipeline_gradient(self, tiny_config):
        rng = np.random.default_rng(4)
        with nx.float64_mode():
            params = init_params(tiny_config, 2).astype(np.float64)
            zt, zd, y = unit_rows(rng, 4, 6), unit_rows(rng, 4, 6), unit_rows(rng, 4, 6)

            def loss():
                return info_nce_loss(fuse_forward_batch(params, zt, zd)[0], y, 0.07)[0]

            z, acts = fuse_forward_batch(params, zt, zd)
            _, gq, _ = info_nce_loss(z, y, 0.07)
            grads, _, _ = fuse_backward(params, acts, zt, zd, gq)
            for name, t in params.tensors.items():
                assert max_relative_error(grads[name], central_difference(loss, t)) < 1e-3, name
