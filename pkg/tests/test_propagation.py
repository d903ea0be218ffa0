import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import EXAMPLE_INPUTS, K_MINUS, K_PLUS, K_V, K_ZERO
from stable_dnn.numerics import AntisymmetricView, ContractError, Dense
from stable_dnn.propagation import (SCHEMES, DivergenceError, NetworkWeights, WeightGradient, forward,
                                    gauss_newton_matvec, jvp, vjp)

VARIANTS = [("euler", None), ("antisym", None), ("leapfrog", None), ("leapfrog", "negdef"), ("verlet", None)]


def make_weights(rng, scheme, N, par=None, n=2, m=None, h=0.3):
    m = m or n
    Ks = [rng.normal(size=(n, m if scheme == "verlet" else n)) for _ in range(N)]
    return NetworkWeights.from_arrays(scheme, Ks, rng.normal(size=N), h=h, gamma=0.1, parametrization=par)


def fd_param_gradient(weights, Y0, E, eps=1e-6):
    theta = weights.flat_params()
    f = lambda t: np.sum(E * forward(weights.with_flat_params(t), Y0, keep_trace=False).output)
    return np.array([(f(theta + eps * e) - f(theta - eps * e)) / (2 * eps) for e in np.eye(len(theta))])


def fd_input_gradient(weights, Y0, E, eps=1e-6):
    f = lambda Y: np.sum(E * forward(weights, Y, keep_trace=False).output)
    out = np.zeros_like(Y0)
    for idx in np.ndindex(Y0.shape):
        d = np.zeros_like(Y0)
        d[idx] = eps
        out[idx] = (f(Y0 + d) - f(Y0 - d)) / (2 * eps)
    return out


def entrywise_rel_error(g, ref, floor=1e-4):
    return float(np.max(np.abs(g - ref) / np.maximum(np.abs(ref), floor)))


class TestForward:
    def test_zero_kernel_is_identity(self, rng):
        Y0 = rng.normal(size=(5, 2))
        w = NetworkWeights.constant("euler", np.zeros((2, 2)), 1, 0.1)
        np.testing.assert_array_equal(forward(w, Y0).output, Y0)

    def test_euler_one_step_by_hand(self):
        w = NetworkWeights.constant("euler", K_ZERO, 1, 0.1)
        Y1 = forward(w, np.array([[0.1, 0.1]])).output
        np.testing.assert_allclose(Y1, [[0.1 + 0.1 * np.tanh(0.1), 0.1 + 0.1 * np.tanh(-0.1)]], rtol=1e-15)
        np.testing.assert_allclose(Y1, [[0.1099668, 0.0900332]], atol=5e-8)

    def test_verlet_origin_fixed(self, rng):
        w = NetworkWeights.constant("verlet", rng.normal(size=(2, 3)), 1, 0.1)
        tr = forward(w, np.zeros((1, 2)))
        assert not np.any(tr.output) and not np.any(tr.aux[1])

    def test_verlet_two_steps_by_hand(self):
        K = K_V.T
        h, y = 0.1, np.array([0.1, 0.1])
        z = np.zeros(3)
        for _ in range(2):
            z = z - h * np.tanh(y @ K)
            y = y + h * np.tanh(z @ K.T)
        w = NetworkWeights.constant("verlet", K, 2, h)
        np.testing.assert_allclose(forward(w, np.array([[0.1, 0.1]])).output[0], y, rtol=1e-15)

    def test_leapfrog_first_step_verbatim(self, rng):
        K = rng.normal(size=(2, 2))
        Y0 = rng.normal(size=(3, 2))
        w = NetworkWeights.constant("leapfrog", K, 2, 0.5, b=0.2)
        tr = forward(w, Y0)
        Y1 = 2 * Y0 + 0.25 * np.tanh(Y0 @ K + 0.2)
        Y2 = 2 * Y1 - Y0 + 0.25 * np.tanh(Y1 @ K + 0.2)
        np.testing.assert_allclose(tr.states[1], Y1, rtol=1e-14)
        np.testing.assert_allclose(tr.states[2], Y2, rtol=1e-14)

    def test_antisym_uses_half_skew_part(self, rng):
        K = rng.normal(size=(3, 3))
        Y0 = rng.normal(size=(2, 3))
        w = NetworkWeights.from_arrays("antisym", [K], [0.3], h=0.2, gamma=0.05)
        A = 0.5 * (K - K.T - 0.05 * np.eye(3))
        np.testing.assert_allclose(forward(w, Y0).output, Y0 + 0.2 * np.tanh(Y0 @ A + 0.3), rtol=1e-14)

    def test_divergence_names_layer(self):
        w = NetworkWeights.constant("euler", np.eye(2), 3, 1e300, activation="identity")
        with pytest.raises(DivergenceError) as exc:
            forward(w, np.ones((1, 2)))
        assert exc.value.layer == 2  # Y_1 = 1 + 1e300 is still finite

    def test_input_width_checked(self, rng):
        w = make_weights(rng, "euler", 2)
        with pytest.raises(ContractError):
            forward(w, np.ones((2, 3)))

    def test_invalid_weights(self, rng):
        with pytest.raises(ContractError):
            NetworkWeights("euler", 0.1, [Dense(np.ones((2, 3)))], [0.0])
        with pytest.raises(ContractError):
            NetworkWeights("euler", -0.1, [Dense(np.eye(2))], [0.0])
        with pytest.raises(ContractError):
            NetworkWeights("antisym", 0.1, [Dense(np.eye(2))], [0.0], gamma=0.1)
        with pytest.raises(ContractError):
            NetworkWeights("rk4", 0.1, [Dense(np.eye(2))], [0.0])

    def test_verlet_boundedness_long_run(self):
        w = NetworkWeights.constant("verlet", K_V.T, 5000, 0.1)
        Y0 = np.array([[0.1, 0.1], [-0.1, -0.1], [0.1, -0.1], [-0.1, 0.1]])
        norms = np.array([np.linalg.norm(Y, axis=1) for Y in forward(w, Y0).states])
        assert norms.min() >= 1e-4 and norms.max() <= 10

    def test_antisym_distance_preservation(self):
        w = NetworkWeights.from_arrays("antisym", [K_PLUS] * 1000, np.zeros(1000), h=0.01, gamma=0.0)
        Y0 = np.array([[0.1, 0.1], [0.1, -0.1]])
        d0 = np.linalg.norm(Y0[0] - Y0[1])
        YN = forward(w, Y0).output
        assert 0.5 * d0 <= np.linalg.norm(YN[0] - YN[1]) <= 2 * d0

    @pytest.mark.parametrize("K,grow", [(K_PLUS, True), (K_MINUS, False)])
    def test_example_divergence_contraction(self, K, grow):
        w = NetworkWeights.constant("euler", K, 10, 0.1)
        Y = forward(w, EXAMPLE_INPUTS).output
        d0 = np.linalg.norm(EXAMPLE_INPUTS[0] - EXAMPLE_INPUTS[1])
        assert (np.linalg.norm(Y[0] - Y[1]) > d0) == grow


class TestDerivatives:
    @pytest.mark.parametrize("scheme,par", VARIANTS)
    @pytest.mark.parametrize("N", [1, 3])
    def test_vjp_matches_finite_differences(self, rng, scheme, par, N):
        w = make_weights(rng, scheme, N, par)
        Y0, E = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        g = vjp(w, forward(w, Y0), E)
        assert entrywise_rel_error(g.flat(), fd_param_gradient(w, Y0, E)) <= 1e-5
        assert entrywise_rel_error(g.inputs, fd_input_gradient(w, Y0, E)) <= 1e-5

    def test_verlet_rectangular_and_relu(self, rng):
        Ks = [rng.normal(size=(3, 2)) for _ in range(3)]
        w = NetworkWeights.from_arrays("verlet", Ks, rng.normal(size=3), h=0.2, activation="relu")
        Y0, E = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        g = vjp(w, forward(w, Y0), E)
        assert entrywise_rel_error(g.flat(), fd_param_gradient(w, Y0, E)) <= 1e-5

    def test_bias_gradient_at_zero_kernel(self, rng):
        w = NetworkWeights.constant("euler", np.zeros((2, 2)), 1, 0.1)
        E = rng.normal(size=(3, 2))
        g = vjp(w, forward(w, rng.normal(size=(3, 2))), E)
        assert g.biases[0] == pytest.approx(0.1 * E.sum(), rel=1e-14)

    def test_bias_tangent_at_zero_kernel(self, rng):
        N, h = 3, 0.1
        w = NetworkWeights.constant("euler", np.zeros((2, 2)), N, h)
        tr = forward(w, rng.normal(size=(2, 2)))
        db = np.array([1.0, 2.0, -0.5])
        out = jvp(w, tr, WeightGradient([np.zeros((2, 2))] * N, db))
        np.testing.assert_allclose(out, np.full((2, 2), h * db.sum()), rtol=1e-14)

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_zero_cotangent_and_tangent(self, rng, scheme):
        w = make_weights(rng, scheme, 2)
        tr = forward(w, rng.normal(size=(3, 2)))
        g = vjp(w, tr, np.zeros((3, 2)))
        assert not np.any(g.flat()) and not np.any(g.inputs)
        assert not np.any(jvp(w, tr, WeightGradient.zeros_like(w)))

    @pytest.mark.parametrize("scheme,par", VARIANTS)
    def test_adjoint_consistency(self, rng, scheme, par):
        for _ in range(50):
            w = make_weights(rng, scheme, 3, par)
            tr = forward(w, rng.normal(size=(4, 2)))
            W = rng.normal(size=(4, 2))
            t = WeightGradient.from_flat(w, rng.normal(size=w.n_params), rng.normal(size=(4, 2)))
            lhs = np.sum(jvp(w, tr, t) * W)
            g = vjp(w, tr, W)
            rhs = g.flat() @ t.flat() + np.sum(g.inputs * t.inputs)
            assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs), 1.0)

    def test_gauss_newton_is_vjp_of_jvp(self, rng):
        w = make_weights(rng, "verlet", 3)
        tr = forward(w, rng.normal(size=(4, 2)))
        d = WeightGradient.from_flat(w, rng.normal(size=w.n_params))
        Gd = gauss_newton_matvec(w, tr, lambda dY: dY, d)
        ref = vjp(w, tr, jvp(w, tr, d), input_grad=False)
        np.testing.assert_allclose(Gd.flat(), ref.flat(), rtol=1e-13)
        zero = gauss_newton_matvec(w, tr, lambda dY: dY, WeightGradient.zeros_like(w))
        assert not np.any(zero.flat())

    @pytest.mark.parametrize("scheme,par", VARIANTS)
    def test_gauss_newton_symmetric_psd(self, rng, scheme, par):
        w = make_weights(rng, scheme, 3, par)
        tr = forward(w, rng.normal(size=(5, 2)))
        B = rng.normal(size=(2, 2))
        H = B @ B.T
        curv = lambda dY: dY @ H
        v, u = (WeightGradient.from_flat(w, rng.normal(size=w.n_params)) for _ in range(2))
        Gv = gauss_newton_matvec(w, tr, curv, v).flat()
        Gu = gauss_newton_matvec(w, tr, curv, u).flat()
        assert abs(Gv @ u.flat() - Gu @ v.flat()) <= 1e-9 * max(1.0, abs(Gv @ u.flat()))
        assert Gv @ v.flat() >= -1e-12

    def test_antisym_gradient_lives_on_base(self, rng):
        w = make_weights(rng, "antisym", 2)
        assert all(isinstance(k, AntisymmetricView) for k in w.kernels)
        g = vjp(w, forward(w, rng.normal(size=(3, 2))), rng.normal(size=(3, 2)))
        # the view depends only on the skew part of its base
        for G in g.kernels:
            np.testing.assert_allclose(G, -G.T, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(scheme=st.sampled_from(SCHEMES), N=st.integers(1, 4), s=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_property_adjoint_consistency(scheme, N, s, seed):
    r = np.random.default_rng(seed)
    w = make_weights(r, scheme, N)
    tr = forward(w, r.normal(size=(s, 2)))
    W = r.normal(size=(s, 2))
    t = WeightGradient.from_flat(w, r.normal(size=w.n_params))
    lhs = np.sum(jvp(w, tr, t) * W)
    rhs = vjp(w, tr, W, input_grad=False).flat() @ t.flat()
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scheme=st.sampled_from(SCHEMES))
def test_property_flat_params_roundtrip(seed, scheme):
    r = np.random.default_rng(seed)
    w = make_weights(r, scheme, 3)
    theta = w.flat_params()
    np.testing.assert_array_equal(w.with_flat_params(theta).flat_params(), theta)
