import numpy as np
import pytest

from nudgenet import ActivationSpec, activation, activation_derivative


@pytest.fixture(params=[0.05, 0.1, 0.5])
def spec(request):
    return ActivationSpec(request.param)


def test_linear_branch(spec):
    eps = spec.epsilon
    assert activation(2 * eps, spec) == 2 * eps
    assert activation(10.0, spec) == 10.0


def test_quadratic_branch_at_zero(spec):
    assert activation(0.0, spec) == pytest.approx(spec.epsilon / 4, rel=1e-15)


def test_zero_branch(spec):
    assert activation(-2 * spec.epsilon, spec) == 0.0
    assert activation(-5.0, spec) == 0.0


def test_c1_continuity_at_seams(spec):
    eps = spec.epsilon
    for seam in (eps, -eps):
        lin = max(0.0, seam)
        quad = seam**2 / (4 * eps) + seam / 2 + eps / 4
        assert abs(lin - quad) < 1e-15
    # derivative branches agree at the seams too
    assert abs(activation_derivative(eps, spec) - 1.0) < 1e-15
    assert abs(activation_derivative(-eps, spec) - 0.0) < 1e-15


def test_derivative_branches(spec):
    eps = spec.epsilon
    assert activation_derivative(0.0, spec) == pytest.approx(0.5)
    assert activation_derivative(10 * eps, spec) == 1.0
    assert activation_derivative(-10 * eps, spec) == 0.0


def test_derivative_matches_finite_difference(spec):
    rng = np.random.default_rng(7)
    x = rng.uniform(-3, 3, 200)
    h = 1e-7
    fd = (activation(x + h, spec) - activation(x - h, spec)) / (2 * h)
    an = activation_derivative(x, spec)
    assert np.max(np.abs(fd - an)) < 1e-6


def test_vectorized_matches_scalar(spec):
    x = np.array([-1.0, -spec.epsilon / 2, 0.0, spec.epsilon / 2, 1.0])
    vec = activation(x, spec)
    assert vec.shape == x.shape
    for xi, vi in zip(x, vec):
        assert activation(float(xi), spec) == vi


def test_nonnegative_everywhere(spec):
    x = np.linspace(-5, 5, 1001)
    assert np.all(activation(x, spec) >= 0.0)


def test_epsilon_must_be_positive():
    with pytest.raises(ValueError):
        ActivationSpec(0.0)
    with pytest.raises(ValueError):
        ActivationSpec(-0.1)
