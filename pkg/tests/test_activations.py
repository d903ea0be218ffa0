import numpy as np
import pytest

from stable_dnn.activations import ReLU, TanH, act_deriv, act_eval, get_activation


def test_tanh_at_zero():
    assert act_eval(TanH(), np.array([0.0]))[0] == 0.0
    assert act_deriv(TanH(), np.array([0.0]))[0] == 1.0


def test_relu_values_and_zero_convention():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(act_eval(ReLU(), x), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(act_deriv(ReLU(), x), [0.0, 0.0, 1.0])


def test_tanh_reference_values():
    assert act_eval(TanH(), np.array(0.5)) == pytest.approx(0.4621171573, abs=1e-10)
    assert act_deriv(TanH(), np.array(0.5)) == pytest.approx(0.7864477330, abs=1e-10)


def test_tanh_derivative_finite_differences():
    x = np.random.default_rng(3).uniform(-3, 3, 1000)
    eps = 1e-5
    fd = (np.tanh(x + eps) - np.tanh(x - eps)) / (2 * eps)
    assert np.max(np.abs(act_deriv(TanH(), x) - fd) / np.abs(fd)) <= 1e-7


@pytest.mark.parametrize("act", [TanH(), ReLU()])
def test_monotone_with_nonnegative_derivative(act):
    x = np.sort(np.random.default_rng(4).normal(scale=3, size=500))
    assert np.all(np.diff(act_eval(act, x)) >= 0)
    assert np.all(act_deriv(act, x) >= 0)


def test_relu_ranges():
    x = np.random.default_rng(5).normal(size=200)
    assert set(np.unique(act_deriv(ReLU(), x))) <= {0.0, 1.0}
    assert np.all(act_eval(ReLU(), x) >= 0)


def test_lookup():
    assert isinstance(get_activation("tanh"), TanH)
    with pytest.raises(ValueError):
        get_activation("sigmoid")
