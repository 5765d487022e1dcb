import time

import numpy as np
import pytest

from ouukit.surrogate import (NetworkSpec, SurrogateModel, TrainConfig,
                              TrainingDataset, TrainingDivergedError,
                              evaluate_errors, init_model, loss_and_grad,
                              train)


def random_dataset(rng, n, r_m, d_z, r_u, with_jac=True):
    return TrainingDataset(
        m_r=rng.normal(size=(n, r_m)),
        z=rng.uniform(-4, 4, size=(n, d_z)),
        u_r=rng.normal(size=(n, r_u)),
        j_r=rng.normal(size=(n, r_u, d_z)) if with_jac else None,
    )


def flat_params(model):
    return [("W", l) for l in range(len(model.weights))] + \
           [("b", l) for l in range(len(model.biases))]


def fd_probe(model, ds, lam, n_probe, seed=0, h=1e-6):
    """Max relative error of the analytic gradient over random parameters."""
    loss, gW, gb = loss_and_grad(model, ds, lam)
    g = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probe):
        l = g.integers(0, len(model.weights))
        kind = g.choice(["W", "b"])
        arr = model.weights[l] if kind == "W" else model.biases[l]
        grad = gW[l] if kind == "W" else gb[l]
        idx = tuple(g.integers(0, s) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        lp = loss_and_grad(model, ds, lam)[0]
        arr[idx] = orig - h
        lm = loss_and_grad(model, ds, lam)[0]
        arr[idx] = orig
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(grad[idx] - fd) / max(abs(fd), 1e-10))
    return worst


class TestNetworkSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            NetworkSpec(r_m=0, d_z=1, r_u=1, hidden=(4,))
        with pytest.raises(ValueError):
            NetworkSpec(r_m=1, d_z=1, r_u=1, hidden=(0,))
        with pytest.raises(ValueError):
            NetworkSpec(r_m=1, d_z=1, r_u=1, hidden=(4,), activation="relu")

    def test_widths(self):
        spec = NetworkSpec(r_m=3, d_z=2, r_u=5, hidden=(7, 9))
        assert spec.input_width == 5
        assert spec.layer_widths == (5, 7, 9, 5)


class TestForward:
    def test_zero_weights_output_trained_mean(self, rng):
        spec = NetworkSpec(r_m=2, d_z=3, r_u=4, hidden=(5,))
        mean = rng.normal(size=4)
        model = init_model(spec, seed=0, output_mean=mean)
        for W in model.weights:
            W[:] = 0.0
        out = model.forward(rng.normal(size=2), rng.normal(size=3))
        np.testing.assert_allclose(out, mean)

    def test_single_linear_layer_is_affine(self, rng):
        spec = NetworkSpec(r_m=2, d_z=2, r_u=3, hidden=(), activation="identity")
        scale = rng.uniform(0.5, 2, 2)
        mean = rng.normal(size=3)
        std = rng.uniform(0.5, 2, 3)
        model = init_model(spec, seed=1, input_scale=scale,
                           output_mean=mean, output_std=std)
        m_r = rng.normal(size=2)
        z = rng.normal(size=2)
        x = np.concatenate([m_r * scale, z])
        expected = mean + std * (model.weights[0] @ x + model.biases[0])
        np.testing.assert_allclose(model.forward(m_r, z), expected, atol=1e-14)

    def test_batch_of_1024_under_budget(self, rng):
        spec = NetworkSpec(r_m=50, d_z=25, r_u=100, hidden=(200, 200))
        model = init_model(spec, seed=2)
        M = rng.normal(size=(1024, 50))
        Z = rng.normal(size=(1024, 25))
        model.forward_batch(M[:8], Z[:8])  # warm up
        t0 = time.perf_counter()
        out = model.forward_batch(M, Z)
        dt = time.perf_counter() - t0
        assert out.shape == (1024, 100)
        assert dt <= 0.2

    def test_dimension_mismatch(self, rng):
        spec = NetworkSpec(r_m=2, d_z=3, r_u=4, hidden=(5,))
        model = init_model(spec, seed=0)
        with pytest.raises(ValueError):
            model.forward(rng.normal(size=3), rng.normal(size=3))


class TestZJacobian:
    def test_zero_weights_zero_jacobian(self, rng):
        spec = NetworkSpec(r_m=2, d_z=3, r_u=4, hidden=(5,))
        model = init_model(spec, seed=0)
        for W in model.weights:
            W[:] = 0.0
        J = model.z_jacobian(rng.normal(size=2), rng.normal(size=3))
        np.testing.assert_array_equal(J, np.zeros((4, 3)))

    @pytest.mark.parametrize("act", ["tanh", "softplus", "softmax"])
    def test_fd_oracle(self, act, rng):
        spec = NetworkSpec(r_m=3, d_z=4, r_u=5, hidden=(8, 6), activation=act)
        model = init_model(spec, seed=3, input_scale=rng.uniform(0.5, 2, 3),
                           output_mean=rng.normal(size=5),
                           output_std=rng.uniform(0.5, 2, 5))
        m_r = rng.normal(size=3)
        z = rng.normal(size=4)
        J = model.z_jacobian(m_r, z)
        h = 1e-6
        for k in range(4):
            zp, zm = z.copy(), z.copy()
            zp[k] += h
            zm[k] -= h
            fd = (model.forward(m_r, zp) - model.forward(m_r, zm)) / (2 * h)
            rel = np.abs(J[:, k] - fd).max() / max(np.abs(fd).max(), 1e-12)
            assert rel <= 1e-7

    def test_linear_network_constant_jacobian(self, rng):
        spec = NetworkSpec(r_m=2, d_z=3, r_u=4, hidden=(6,), activation="identity")
        model = init_model(spec, seed=4)
        J1 = model.z_jacobian(rng.normal(size=2), rng.normal(size=3))
        J2 = model.z_jacobian(rng.normal(size=2), rng.normal(size=3))
        np.testing.assert_allclose(J1, J2, atol=1e-12)


class TestLossAndGrad:
    def test_l2_gradient_matches_fd(self, rng):
        spec = NetworkSpec(r_m=3, d_z=4, r_u=5, hidden=(8, 6))
        model = init_model(spec, seed=5, output_mean=rng.normal(size=5),
                           output_std=rng.uniform(0.5, 2, 5))
        ds = random_dataset(rng, 2, 3, 4, 5)
        assert fd_probe(model, ds, 0.0, n_probe=50) <= 1e-6

    def test_h1_gradient_matches_fd(self, rng):
        spec = NetworkSpec(r_m=3, d_z=4, r_u=5, hidden=(8, 6), activation="tanh")
        model = init_model(spec, seed=6, input_scale=rng.uniform(0.5, 2, 3),
                           output_mean=rng.normal(size=5),
                           output_std=rng.uniform(0.5, 2, 5))
        ds = random_dataset(rng, 2, 3, 4, 5)
        assert fd_probe(model, ds, 1.0, n_probe=50) <= 1e-5

    @pytest.mark.parametrize("act", ["softplus", "sigmoid", "softmax"])
    def test_h1_gradient_other_activations(self, act, rng):
        spec = NetworkSpec(r_m=2, d_z=3, r_u=4, hidden=(6, 5), activation=act)
        model = init_model(spec, seed=7)
        ds = random_dataset(rng, 3, 2, 3, 4)
        # softmax outputs are tiny, so the FD itself needs a larger step
        h = 1e-5 if act == "softmax" else 1e-6
        assert fd_probe(model, ds, 1.0, n_probe=30, h=h) <= 1e-5

    def test_perfect_fit_zero_loss_zero_grad(self, rng):
        spec = NetworkSpec(r_m=2, d_z=3, r_u=4, hidden=(6,))
        model = init_model(spec, seed=8, output_mean=rng.normal(size=4),
                           output_std=rng.uniform(0.5, 2, 4))
        m_r = rng.normal(size=(3, 2))
        z = rng.normal(size=(3, 3))
        ds = TrainingDataset(
            m_r=m_r, z=z,
            u_r=model.forward_batch(m_r, z),
            j_r=model.z_jacobian_batch(m_r, z),
        )
        loss, gW, gb = loss_and_grad(model, ds, 1.0)
        assert loss <= 1e-12
        assert max(np.abs(g).max() for g in gW + gb) <= 1e-12

    def test_missing_jacobian_data_raises(self, rng):
        spec = NetworkSpec(r_m=2, d_z=3, r_u=4, hidden=(6,))
        model = init_model(spec, seed=9)
        ds = random_dataset(rng, 2, 2, 3, 4, with_jac=False)
        with pytest.raises(ValueError):
            loss_and_grad(model, ds, 1.0)


class TestTrain:
    def test_teacher_student_recovery(self, rng):
        spec = NetworkSpec(r_m=2, d_z=2, r_u=3, hidden=(4,))
        teacher = init_model(spec, seed=123)
        m_r = rng.normal(size=(256, 2))
        z = rng.uniform(-1, 1, size=(256, 2))
        ds = TrainingDataset(m_r=m_r, z=z, u_r=teacher.forward_batch(m_r, z),
                             j_r=teacher.z_jacobian_batch(m_r, z))
        m_t = rng.normal(size=(128, 2))
        z_t = rng.uniform(-1, 1, size=(128, 2))

        def recover(lam):
            cfg = TrainConfig(epochs=8000, batch_size=256, lr=2e-2,
                              lr_drop_factor=0.02, lr_drop_epoch=4000,
                              jacobian_weight=lam, seed=0)
            model, history = train(ds, spec, cfg)
            assert history[-1] < history[0]
            return np.mean((model.forward_batch(m_t, z_t)
                            - teacher.forward_batch(m_t, z_t)) ** 2)

        assert recover(0.0) <= 1e-6
        # matching derivatives pins down the teacher far more tightly
        assert recover(1.0) <= 1e-9

    def test_training_deterministic(self, rng):
        spec = NetworkSpec(r_m=2, d_z=2, r_u=3, hidden=(6,))
        ds = random_dataset(rng, 32, 2, 2, 3)
        cfg = TrainConfig(epochs=5, batch_size=8, jacobian_weight=1.0, seed=42)
        m1, h1 = train(ds, spec, cfg)
        m2, h2 = train(ds, spec, cfg)
        assert h1 == h2
        for a, b in zip(m1.weights, m2.weights):
            assert np.array_equal(a, b)
        for a, b in zip(m1.biases, m2.biases):
            assert np.array_equal(a, b)

    def test_nonfinite_loss_aborts_with_location(self, rng):
        spec = NetworkSpec(r_m=2, d_z=2, r_u=3, hidden=(6,))
        ds = random_dataset(rng, 16, 2, 2, 3)
        ds.u_r[5, 0] = np.nan
        with pytest.raises(TrainingDivergedError) as err:
            train(ds, spec, TrainConfig(epochs=2, batch_size=16, seed=0,
                                        jacobian_weight=0.0))
        assert err.value.epoch == 0
        assert err.value.batch_index is not None

    def test_requires_jacobian_data(self, rng):
        spec = NetworkSpec(r_m=2, d_z=2, r_u=3, hidden=(6,))
        ds = random_dataset(rng, 8, 2, 2, 3, with_jac=False)
        with pytest.raises(ValueError):
            train(ds, spec, TrainConfig(epochs=1, jacobian_weight=1.0, seed=0))


class TestEvaluateErrors:
    def test_exact_interpolant_scores_zero(self, rng):
        spec = NetworkSpec(r_m=2, d_z=3, r_u=4, hidden=(6,))
        model = init_model(spec, seed=10)
        m_r = rng.normal(size=(5, 2))
        z = rng.normal(size=(5, 3))
        ds = TrainingDataset(
            m_r=m_r, z=z,
            u_r=model.forward_batch(m_r, z),
            j_r=model.z_jacobian_batch(m_r, z),
            state_norm_sq=np.full(5, 2.0),
            trunc_norm_sq=np.zeros(5),
        )
        errs = evaluate_errors(model, ds)
        assert errs.state_rel_l2 <= 1e-12
        assert errs.jac_rel_hs <= 1e-12

    def test_reduced_error_lower_bounds_state_error(self, rng):
        spec = NetworkSpec(r_m=2, d_z=3, r_u=4, hidden=(6,))
        model = init_model(spec, seed=11)
        ds = random_dataset(rng, 6, 2, 3, 4)
        ds.state_norm_sq = rng.uniform(1, 2, 6)
        ds.trunc_norm_sq = rng.uniform(0.01, 0.1, 6)
        errs = evaluate_errors(model, ds)
        assert errs.reduced_rel_l2 <= errs.state_rel_l2

    def test_requires_aux_norms(self, rng):
        spec = NetworkSpec(r_m=2, d_z=3, r_u=4, hidden=(6,))
        model = init_model(spec, seed=12)
        ds = random_dataset(rng, 4, 2, 3, 4)
        with pytest.raises(ValueError):
            evaluate_errors(model, ds)
