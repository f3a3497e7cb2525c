import numpy as np
import pytest

from ambiguity.nlp_solver import (
    CONVERGED,
    EvaluationError,
    INFEASIBLE,
    NlpProblem,
    SolverOptions,
    StartSampler,
    check_gradients,
    multistart_solve,
    solve,
)


def circle_problem(sense="maximize"):
    # extremize x + y on the unit circle: optimum +-sqrt(2)
    return NlpProblem(
        2,
        lambda x: x[0] + x[1],
        sense,
        eq_constraints=lambda x: np.array([x @ x - 1.0]),
        gradient=lambda x: np.ones(2),
        eq_jacobian=lambda x: 2 * x[None, :],
    )


@pytest.mark.parametrize("method", ["auglag", "sqp"])
def test_equality_constrained(method):
    r = solve(circle_problem(), np.array([0.3, 0.1]), SolverOptions(method=method))
    assert r.status == CONVERGED
    assert np.allclose(r.solution, [np.sqrt(0.5)] * 2, atol=1e-5)
    assert r.max_violation <= 1e-8


@pytest.mark.parametrize("method", ["auglag", "sqp"])
def test_inequality_and_bounds(method):
    # min (x-2)^2 + (y-1)^2  s.t. x + y <= 1, 0 <= y <= 0.25: projection onto the line is (1, 0)
    p = NlpProblem(2, lambda x: (x[0] - 2) ** 2 + (x[1] - 1) ** 2,
                   ineq_constraints=lambda x: np.array([x[0] + x[1] - 1.0]),
                   lower=[-np.inf, 0.0], upper=[np.inf, 0.25])
    r = solve(p, np.zeros(2), SolverOptions(method=method))
    assert np.allclose(r.solution, [1.0, 0.0], atol=1e-5)


def test_derivative_free_problem_uses_differences():
    p = NlpProblem(3, lambda x: np.sum((x - np.arange(3)) ** 2))
    r = solve(p, np.zeros(3))
    assert np.allclose(r.solution, np.arange(3), atol=1e-5)


def test_gradient_check_detects_bad_gradient():
    good = circle_problem()
    assert check_gradients(good, np.random.default_rng(0).standard_normal((5, 2))) < 1e-4
    bad = NlpProblem(2, lambda x: x @ x, gradient=lambda x: x)
    assert check_gradients(bad, np.random.default_rng(0).standard_normal((5, 2))) > 0.1


def test_infeasible_problem_is_reported():
    p = NlpProblem(1, lambda x: x[0], eq_constraints=lambda x: np.array([x[0] ** 2 + 1.0]))
    r = solve(p, np.array([0.5]), SolverOptions(method="sqp", max_outer=50))
    assert r.status != CONVERGED
    assert r.max_violation >= 1.0 - 1e-6


def test_nan_initial_guess_rejected():
    with pytest.raises(EvaluationError):
        solve(circle_problem(), np.array([np.nan, 0.0]))


def test_problem_validation():
    with pytest.raises(ValueError):
        NlpProblem(0, lambda x: 0.0)
    with pytest.raises(ValueError):
        NlpProblem(1, lambda x: 0.0, sense="max")
    with pytest.raises(ValueError):
        NlpProblem(1, lambda x: 0.0, lower=[1.0], upper=[0.0])
    with pytest.raises(ValueError):
        SolverOptions(method="newton")


def test_start_sampler_prefix_property():
    s = StartSampler(np.zeros(4), 1.0, seed=3)
    assert np.all(s.sample(0) == 0)
    assert np.array_equal(s.sample(2), StartSampler(np.zeros(4), 1.0, seed=3).sample(2))
    assert not np.array_equal(s.sample(1), s.sample(2))


def test_multistart_finds_global_optimum_and_is_deterministic():
    # double well: local minimum near x=1, global near x=-1
    f = lambda x: (x[0] ** 2 - 1) ** 2 + 0.3 * x[0]
    p = NlpProblem(1, f)
    sampler = StartSampler(np.array([1.0]), 2.0, seed=0)
    r1 = multistart_solve(p, 8, sampler, SolverOptions(method="sqp"))
    r2 = multistart_solve(p, 8, sampler, SolverOptions(method="sqp"))
    assert r1.solution[0] < 0
    assert r1.objective_value == r2.objective_value
    assert len(r1.trace) == 8


def test_multistart_marks_infeasible_winner():
    p = NlpProblem(1, lambda x: x[0], eq_constraints=lambda x: np.array([x[0] ** 2 + 1.0]))
    r = multistart_solve(p, 2, StartSampler(np.array([0.5])), SolverOptions(method="sqp", max_outer=20))
    assert r.status == INFEASIBLE
