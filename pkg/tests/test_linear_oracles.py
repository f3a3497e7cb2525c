import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import solve_continuous_lyapunov

from ambiguity.linear_oracles import (
    LtiSystem,
    ambiguity_from_gramian,
    controllability_gramian,
    min_energy_cost,
    observability_gramian,
    weakest_direction,
    worst_energy_on_ball,
)

DOUBLE_INTEGRATOR = LtiSystem([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], [[1.0, 0.0]], (0.0, 1.0))
# smallest eigenvalue of [[1/3, 1/2], [1/2, 1]]: (4/3 - sqrt(16/9 - 1/3)) / 2
SIGMA_MIN_DI = (4 / 3 - np.sqrt(16 / 9 - 1 / 3)) / 2


def test_scalar_observability_gramian():
    s = LtiSystem([[-1.0]], np.zeros((1, 0)), [[1.0]], (0.0, 1.0))
    assert np.isclose(observability_gramian(s)[0, 0], (1 - np.exp(-2)) / 2, rtol=1e-12)


def test_double_integrator_gramians():
    assert np.allclose(controllability_gramian(DOUBLE_INTEGRATOR), [[1 / 3, 1 / 2], [1 / 2, 1]], atol=1e-12)
    assert np.allclose(observability_gramian(DOUBLE_INTEGRATOR), [[1, 1 / 2], [1 / 2, 1 / 3]], atol=1e-12)
    lam, v = weakest_direction(controllability_gramian(DOUBLE_INTEGRATOR))
    assert lam == pytest.approx(SIGMA_MIN_DI, rel=1e-10)
    assert SIGMA_MIN_DI == pytest.approx(0.0657415, abs=1e-7)
    assert np.isclose(np.linalg.norm(v), 1.0)


def test_min_energy_closed_form():
    P = controllability_gramian(DOUBLE_INTEGRATOR)
    # x1 = (1, 0): P^{-1} = [[12, -6], [-6, 4]] so the cost is sqrt(12)
    assert min_energy_cost(P, [1.0, 0.0]) == pytest.approx(np.sqrt(12.0), rel=1e-10)
    assert min_energy_cost(P, [0.0, 0.0]) == 0.0
    assert worst_energy_on_ball(P, 1e-2) == pytest.approx(1e-2 / np.sqrt(SIGMA_MIN_DI), rel=1e-10)


def test_unobservable_system_is_infinite():
    s = LtiSystem(np.eye(2) * -1.0, np.zeros((2, 0)), np.zeros((1, 2)), (0.0, 2.0))
    P = observability_gramian(s)
    assert np.all(P == 0)
    assert ambiguity_from_gramian(P, 1e-3) == np.inf
    assert min_energy_cost(np.diag([1.0, 0.0]), [0.0, 1.0]) == np.inf


def test_quadrature_converged():
    s = LtiSystem([[-0.3, 2.0], [-2.0, -0.1]], [[0.0], [1.0]], [[1.0, 0.5]], (0.0, 5.0))
    P1, P2 = observability_gramian(s, panels=64), observability_gramian(s, panels=128)
    assert np.max(np.abs(P1 - P2)) < 1e-10 * np.max(np.abs(P2))


@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_long_horizon_matches_lyapunov(n, seed):
    # for Hurwitz A the finite-horizon gramian approaches the Lyapunov solution
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    A -= (np.max(np.linalg.eigvals(A).real) + 1.0) * np.eye(n)
    C = rng.standard_normal((1, n))
    P = observability_gramian(LtiSystem(A, np.zeros((n, 0)), C, (0.0, 40.0)), panels=256)
    L = solve_continuous_lyapunov(A.T, -C.T @ C)
    assert np.allclose(P, L, rtol=1e-6, atol=1e-9)


def test_validation():
    with pytest.raises(ValueError):
        LtiSystem(np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        LtiSystem(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros((1, 2)), (1.0, 1.0))
    with pytest.raises(ValueError):
        ambiguity_from_gramian(np.eye(2), 0.0)
