import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stable_dnn.classifier import ClassifierParams, LeastSquares, Logistic
from stable_dnn.datasets import LabeledSet, one_hot
from stable_dnn.numerics import ContractError, PcgConfig
from stable_dnn.propagation import NetworkWeights, forward
from stable_dnn.regularization import RegConfig, time_smooth
from stable_dnn.training import (LevelSchedule, NetworkSpec, PropagationObjective, TrainConfig, bcd_train,
                                 gauss_newton_update, init_weights, interpolate_in_time, multilevel_train,
                                 prolongate)


def blobs(rng, s=80, sep=2.5):
    labels = np.arange(s) % 2
    Y = rng.normal(size=(s, 2)) * 0.6 + np.where(labels[:, None] == 0, -sep / 2, sep / 2)
    return LabeledSet(Y, one_hot(labels, 2))


def quick_cfg(**kw):
    base = dict(bcd_iterations=5, final_time=2.0, reg=RegConfig(alpha_time=1e-3))
    base.update(kw)
    return TrainConfig(**base)


class TestProlongation:
    def test_two_to_four(self, rng):
        K0, K1 = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        w = NetworkWeights.from_arrays("euler", [K0, K1], [1.0, 3.0], h=0.5)
        p = prolongate(w, 4)
        expected = [K0, 0.75 * K0 + 0.25 * K1, 0.25 * K0 + 0.75 * K1, K1]
        for op, K in zip(p.kernels, expected):
            np.testing.assert_allclose(op.params, K, atol=1e-15)
        np.testing.assert_allclose(p.biases, [1.0, 1.5, 2.5, 3.0])
        assert p.h == 0.25 and p.final_time == pytest.approx(w.final_time)

    def test_constant_path_stays_constant(self, rng):
        K = rng.normal(size=(3, 3))
        p = prolongate(NetworkWeights.constant("verlet", K, 3, 0.2, b=0.4), 12)
        for op in p.kernels:
            np.testing.assert_allclose(op.params, K, atol=1e-15)
        np.testing.assert_allclose(p.biases, 0.4)

    def test_same_size_is_identity(self, rng):
        w = NetworkWeights.from_arrays("antisym", [rng.normal(size=(2, 2)) for _ in range(3)], h=0.3)
        np.testing.assert_allclose(prolongate(w, 3).flat_params(), w.flat_params(), atol=1e-15)

    def test_refuses_coarsening(self):
        with pytest.raises(ContractError):
            prolongate(NetworkWeights.constant("euler", np.eye(2), 4, 0.1), 2)

    def test_interpolation_hits_nodes(self, rng):
        P = rng.normal(size=(5, 3))
        T = 2.0
        centres = (np.arange(5) + 0.5) * T / 5
        np.testing.assert_allclose(interpolate_in_time(P, T, centres), P, atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 100_000), N=st.integers(1, 6), factor=st.sampled_from([2, 4]))
    def test_smoothness_not_increased(self, seed, N, factor):
        r = np.random.default_rng(seed)
        w = NetworkWeights.from_arrays("euler", [r.normal(size=(2, 2)) for _ in range(N)], r.normal(size=N),
                                       h=0.5)
        # the linear interpolant has no more variation than the coarse path
        assert time_smooth(prolongate(w, N * factor))[0] <= time_smooth(w)[0] * (1 + 1e-12) + 1e-14


class TestGaussNewton:
    def test_linear_least_squares_one_step(self, rng):
        # identity activation, one Euler step: the output is affine in (K, b), so one exact
        # Gauss-Newton solve lands on the least-squares minimizer
        Y0 = rng.normal(size=(30, 2))
        C = rng.normal(size=(30, 2))
        clf = ClassifierParams(rng.normal(size=(2, 2)), rng.normal(size=2))
        w = NetworkWeights.from_arrays("euler", [np.zeros((2, 2))], [0.0], h=1.0, activation="identity")
        cfg = TrainConfig(hessian_subsample=30, gn_pcg=PcgConfig(50, 1e-14), gn_preconditioner="none",
                          reg=RegConfig())
        w1, info = gauss_newton_update(Y0, C, w, clf, cfg, rng, LeastSquares())
        assert info.step == 1.0 and not info.gradient_fallback
        _, g, _, _ = PropagationObjective(Y0, C, clf, LeastSquares(), RegConfig()).value_grad(w1)
        assert np.linalg.norm(g) <= 1e-10
        # direct least squares on the design matrix of the affine map (K, b) -> logits
        A = np.vstack([np.append(np.kron(Y0[i], clf.W[:, c]), clf.W[:, c].sum())
                       for i in range(30) for c in range(2)])
        rhs = (C - Y0 @ clf.W - clf.mu).reshape(-1)
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
        np.testing.assert_allclose(w1.flat_params(), sol, rtol=1e-8, atol=1e-10)

    def test_zero_gradient_no_update(self):
        w = NetworkWeights.constant("euler", np.eye(2), 2, 0.1)
        clf = ClassifierParams.zeros(2, 2)
        w1, info = gauss_newton_update(np.ones((4, 2)), np.eye(2)[[0, 1, 0, 1]], w, clf, TrainConfig(),
                                       np.random.default_rng(0), Logistic())
        assert w1 is w and info.step == 0.0

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 100_000), scheme=st.sampled_from(["euler", "antisym", "leapfrog", "verlet"]))
    def test_objective_never_increases(self, seed, scheme):
        r = np.random.default_rng(seed)
        data = blobs(r, s=24)
        w = init_weights(NetworkSpec(scheme=scheme), 3, 2.0, r)
        clf = ClassifierParams(r.normal(size=(2, 2)), r.normal(size=2))
        cfg = TrainConfig(hessian_subsample=8, reg=RegConfig(alpha_time=1e-2))
        _, info = gauss_newton_update(data.Y0, data.C, w, clf, cfg, r)
        assert info.objective_after <= info.objective_before


class TestBCD:
    def test_zero_iterations(self, rng):
        data = blobs(rng)
        w = init_weights(NetworkSpec(scheme="euler"), 4, 2.0, rng)
        clf = ClassifierParams.zeros(2, 2)
        w1, c1, rep = bcd_train(data, data, w, clf, quick_cfg(bcd_iterations=0))
        assert w1 is w and c1 is clf and rep.records == []

    def test_separable_data(self, rng):
        data = blobs(rng, sep=4.0)
        w = init_weights(NetworkSpec(scheme="euler"), 4, 2.0, rng)
        w1, clf, rep = bcd_train(data, data, w, ClassifierParams.zeros(2, 2), quick_cfg(bcd_iterations=20))
        assert rep.best().train_error == 0.0
        assert min(r.val_error for r in rep.records) == 0.0

    def test_returns_best_snapshot(self, rng):
        tr, va = blobs(rng, sep=1.5), blobs(rng, sep=1.5)
        w = init_weights(NetworkSpec(scheme="verlet"), 4, 2.0, rng)
        w1, clf, rep = bcd_train(tr, va, w, ClassifierParams.zeros(2, 2), quick_cfg(bcd_iterations=8))
        best = rep.best()
        from stable_dnn.training import evaluate_error
        assert evaluate_error(w1, clf, va, Logistic()) == best.val_error
        assert all(r.best_id <= r.iteration for r in rep.records)

    def test_deterministic(self, rng):
        data = blobs(rng)
        spec = NetworkSpec(scheme="verlet")
        runs = [multilevel_train(data, data, [2, 4], quick_cfg(batch_size=40, hessian_subsample=20), spec)
                for _ in range(2)]
        np.testing.assert_array_equal(runs[0][0].flat_params(), runs[1][0].flat_params())
        np.testing.assert_array_equal(runs[0][1].flat(), runs[1][1].flat())
        assert runs[0][2].to_csv() == runs[1][2].to_csv()

    def test_dimension_mismatch(self, rng):
        data = blobs(rng)
        w = init_weights(NetworkSpec(scheme="euler", width=3), 2, 1.0, rng)
        with pytest.raises(ContractError):
            bcd_train(data, data, w, ClassifierParams.zeros(3, 2), quick_cfg())


class TestMultilevel:
    def test_single_level_equals_bcd(self, rng):
        data = blobs(rng)
        spec, cfg = NetworkSpec(scheme="antisym"), quick_cfg()
        w_ml, c_ml, _ = multilevel_train(data, data, [4], cfg, spec)
        r = np.random.default_rng(cfg.rng_seed)
        w0 = init_weights(spec, 4, cfg.final_time, r, cfg.init_scale)
        w_b, c_b, _ = bcd_train(data, data, w0, ClassifierParams.zeros(2, 2), cfg, r)
        np.testing.assert_array_equal(w_ml.flat_params(), w_b.flat_params())
        np.testing.assert_array_equal(c_ml.flat(), c_b.flat())

    def test_report_per_level(self, rng):
        data = blobs(rng)
        w, _, rep = multilevel_train(data, data, LevelSchedule.doubling(2, 8), quick_cfg(bcd_iterations=3),
                                     NetworkSpec(scheme="verlet"))
        assert w.N == 8 and rep.levels() == [0, 1, 2]
        assert sorted(rep.best_val_accuracy()) == [2, 4, 8]
        assert rep.to_csv().splitlines()[0].startswith("level,layers,iteration")

    def test_final_time_fixed_across_levels(self, rng):
        data = blobs(rng)
        w, _, _ = multilevel_train(data, data, [2, 4], quick_cfg(bcd_iterations=1, final_time=3.0),
                                   NetworkSpec(scheme="euler"))
        assert w.final_time == pytest.approx(3.0) and w.h == pytest.approx(0.75)

    def test_schedule_validation(self):
        with pytest.raises(ContractError):
            LevelSchedule([])
        with pytest.raises(ContractError):
            LevelSchedule([8, 4])
        with pytest.raises(ContractError):
            LevelSchedule([0, 2])
        assert LevelSchedule.doubling(4, 128).layer_counts == [4, 8, 16, 32, 64, 128]

    def test_config_validation(self):
        with pytest.raises(ContractError):
            TrainConfig(final_time=0.0)
        with pytest.raises(ContractError):
            TrainConfig(batch_size=10, hessian_subsample=20)


class TestInit:
    def test_verlet_aux_width(self, rng):
        w = init_weights(NetworkSpec(scheme="verlet", width=2, aux_width=3), 5, 1.0, rng)
        assert w.kernels[0].params.shape == (2, 3)
        assert forward(w, np.ones((1, 2))).output.shape == (1, 2)

    def test_std_and_zero_biases(self):
        w = init_weights(NetworkSpec(scheme="euler", width=64), 50, 1.0, np.random.default_rng(0), scale=0.5)
        assert np.std(w.kernel_stack()) == pytest.approx(0.5 / 8, rel=0.02)
        assert not np.any(w.biases)

    def test_conv_needs_image_shape(self, rng):
        with pytest.raises(ContractError):
            init_weights(NetworkSpec(scheme="antisym", width=8, kernel="conv"), 2, 1.0, rng)
