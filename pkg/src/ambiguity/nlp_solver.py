"""Smooth constrained nonlinear programming with deterministic multi-start.

Problems are stated as

    minimize or maximize  f(x)
    subject to            c(x) = 0,  g(x) <= 0,  lower <= x <= upper

Two back ends share one result type. ``"auglag"`` is an augmented-Lagrangian outer loop
around a bound-constrained limited-memory BFGS inner solve (scipy's L-BFGS-B); ``"sqp"``
hands the whole problem to scipy's SLSQP. Derivatives come from user callbacks when given,
otherwise from central finite differences.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import optimize
from scipy.linalg import lu_factor, lu_solve

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERATIONS = "max_iterations"
INFEASIBLE = "infeasible"


class EvaluationError(RuntimeError):
    """A problem callback produced non-finite values."""


@dataclass
class NlpProblem:
    """Finite-dimensional problem with optional analytic derivatives.

    ``eq_constraints`` targets zero, ``ineq_constraints`` targets ``<= 0``. Jacobian
    callbacks return dense ``(m, dim)`` arrays.
    """

    dim: int
    objective: Callable[[np.ndarray], float]
    sense: str = "minimize"
    eq_constraints: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq_constraints: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eq_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        if self.sense not in ("minimize", "maximize"):
            raise ValueError(f"sense must be 'minimize' or 'maximize', got {self.sense!r}")
        self.lower = _bound(self.lower, -np.inf, self.dim, "lower")
        self.upper = _bound(self.upper, np.inf, self.dim, "upper")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bounds exceed upper bounds")

    @property
    def sign(self) -> float:
        return -1.0 if self.sense == "maximize" else 1.0


def _bound(b, default, dim, name):
    if b is None:
        return np.full(dim, default)
    b = np.broadcast_to(np.asarray(b, dtype=float), (dim,)).copy()
    if np.any(np.isnan(b)):
        raise ValueError(f"{name} bounds contain NaN")
    return b


@dataclass
class SolverOptions:
    method: str = "auglag"
    feasibility_tol: float = 1e-8
    stationarity_tol: float = 1e-6
    max_outer: int = 200
    max_inner: int = 500
    initial_penalty: float = 10.0
    penalty_growth: float = 10.0
    max_penalty: float = 1e12
    fd_rel_step: float = 1e-7
    fd_min_step: float = 1e-6
    sqp_ftol: float = 1e-12
    record_trace: bool = False

    def __post_init__(self):
        if self.method not in ("auglag", "sqp"):
            raise ValueError(f"unknown solver method {self.method!r}")


@dataclass
class NlpResult:
    solution: np.ndarray
    objective_value: float
    max_eq_violation: float
    max_ineq_violation: float
    status: str
    iterations: int
    start_index: int = 0
    message: str = ""
    trace: list = field(default_factory=list, repr=False)
    total_violation: float = 0.0

    @property
    def max_violation(self) -> float:
        return max(self.max_eq_violation, self.max_ineq_violation)

    def summary(self) -> dict:
        return {
            "objective_value": float(self.objective_value),
            "max_eq_violation": float(self.max_eq_violation),
            "max_ineq_violation": float(self.max_ineq_violation),
            "status": self.status,
            "iterations": int(self.iterations),
            "start_index": int(self.start_index),
            "total_violation": float(self.total_violation),
            "message": self.message,
        }


# finite differences ---------------------------------------------------------------------


def fd_steps(x: np.ndarray, options: SolverOptions | None = None) -> np.ndarray:
    options = options or SolverOptions()
    return np.maximum(options.fd_min_step, options.fd_rel_step * np.abs(x))


def fd_jacobian(fun, x, options: SolverOptions | None = None) -> np.ndarray:
    """Central-difference Jacobian of a vector (or scalar) function; rows are outputs."""
    x = np.asarray(x, dtype=float)
    h = fd_steps(x, options)
    f0 = np.atleast_1d(fun(x))
    J = np.empty((f0.size, x.size))
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        J[:, i] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2.0 * h[i])
    return J


class _Evaluator:
    """Wraps a problem with derivative fallbacks and sign handling (always minimizes)."""

    def __init__(self, problem: NlpProblem, options: SolverOptions):
        self.p = problem
        self.options = options
        self.sign = problem.sign

    def f(self, x):
        return self.sign * float(self.p.objective(x))

    def grad(self, x):
        if self.p.gradient is not None:
            return self.sign * np.asarray(self.p.gradient(x), dtype=float)
        return self.sign * fd_jacobian(self.p.objective, x, self.options)[0]

    def c(self, x):
        if self.p.eq_constraints is None:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self.p.eq_constraints(x), dtype=float))

    def g(self, x):
        if self.p.ineq_constraints is None:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self.p.ineq_constraints(x), dtype=float))

    def jc(self, x):
        if self.p.eq_constraints is None:
            return np.zeros((0, self.p.dim))
        if self.p.eq_jacobian is not None:
            return np.atleast_2d(np.asarray(self.p.eq_jacobian(x), dtype=float))
        return fd_jacobian(self.c, x, self.options)

    def jg(self, x):
        if self.p.ineq_constraints is None:
            return np.zeros((0, self.p.dim))
        if self.p.ineq_jacobian is not None:
            return np.atleast_2d(np.asarray(self.p.ineq_jacobian(x), dtype=float))
        return fd_jacobian(self.g, x, self.options)

    def violations(self, x) -> tuple[float, float]:
        c = self.c(x)
        g = self.g(x)
        ve = float(np.max(np.abs(c))) if c.size else 0.0
        vi = float(max(0.0, np.max(g))) if g.size else 0.0
        box = float(max(0.0, np.max(self.p.lower - x), np.max(x - self.p.upper)))
        return ve, max(vi, box)

    def total_violation(self, x) -> float:
        """Sum of absolute equality residuals and positive inequality and bound excesses."""
        c = self.c(x)
        g = self.g(x)
        box = np.maximum(0.0, self.p.lower - x) + np.maximum(0.0, x - self.p.upper)
        return float(np.sum(np.abs(c)) + np.sum(np.maximum(0.0, g)) + np.sum(box))


def check_gradients(problem: NlpProblem, points, options: SolverOptions | None = None) -> float:
    """Largest relative disagreement between supplied derivatives and central differences.

    Only callbacks the problem actually supplies are checked; returns 0 if none are.
    """
    options = options or SolverOptions()
    worst = 0.0
    pairs = [
        (problem.gradient, lambda x: np.atleast_1d(problem.objective(x))),
        (problem.eq_jacobian, problem.eq_constraints),
        (problem.ineq_jacobian, problem.ineq_constraints),
    ]
    for x in np.atleast_2d(points):
        for analytic, fun in pairs:
            if analytic is None or fun is None:
                continue
            A = np.atleast_2d(analytic(x))
            F = fd_jacobian(fun, x, options)
            scale = max(1.0, float(np.max(np.abs(F))))
            worst = max(worst, float(np.max(np.abs(A - F))) / scale)
    return worst


# solvers --------------------------------------------------------------------------------


def _check_start(ev: _Evaluator, x):
    vals = [np.atleast_1d(ev.f(x)), ev.c(x), ev.g(x)]
    if not all(np.all(np.isfinite(v)) for v in vals):
        raise EvaluationError("problem callbacks are not finite at the initial point")


def solve(problem: NlpProblem, initial_guess, options: SolverOptions | None = None) -> NlpResult:
    """Find a KKT point of ``problem`` starting from ``initial_guess``.

    The start is clamped into the bound box. The returned objective is in the caller's sense.
    """
    options = options or SolverOptions()
    x0 = np.asarray(initial_guess, dtype=float).ravel()
    if x0.size != problem.dim:
        raise ValueError(f"initial guess has length {x0.size}, problem dim is {problem.dim}")
    x0 = np.clip(x0, problem.lower, problem.upper)
    ev = _Evaluator(problem, options)
    _check_start(ev, x0)
    if options.method == "sqp":
        return _solve_sqp(ev, x0, options)
    return _solve_auglag(ev, x0, options)


def _finish(ev: _Evaluator, x, iterations, stationarity, options, message="", trace=None):
    ve, vi = ev.violations(x)
    feasible = max(ve, vi) <= options.feasibility_tol
    if feasible and stationarity <= options.stationarity_tol:
        status = CONVERGED
    elif feasible:
        status = MAX_ITERATIONS
    else:
        status = INFEASIBLE if iterations >= 0 else MAX_ITERATIONS
    return NlpResult(
        solution=x,
        objective_value=float(ev.p.objective(x)),
        max_eq_violation=ve,
        max_ineq_violation=vi,
        status=status,
        iterations=int(iterations),
        message=message,
        trace=trace or [],
        total_violation=ev.total_violation(x),
    )


def _projected_gradient(x, g, lower, upper) -> float:
    step = np.clip(x - g, lower, upper) - x
    return float(np.max(np.abs(step))) if step.size else 0.0


def _solve_auglag(ev: _Evaluator, x0, options: SolverOptions) -> NlpResult:
    lower, upper = ev.p.lower, ev.p.upper
    x = x0.copy()
    c = ev.c(x)
    g = ev.g(x)
    lam = np.zeros(c.size)
    mu = np.zeros(g.size)
    rho = options.initial_penalty
    bounds = list(zip(np.where(np.isfinite(lower), lower, None), np.where(np.isfinite(upper), upper, None)))
    trace: list = []

    def infeas(c, g, mu, rho):
        vi = np.maximum(g, -mu / rho) if g.size else np.zeros(0)
        return max(float(np.max(np.abs(c))) if c.size else 0.0, float(np.max(np.abs(vi))) if vi.size else 0.0)

    def merit_and_grad(xk, lam, mu, rho):
        f = ev.f(xk)
        gf = ev.grad(xk)
        ck = ev.c(xk)
        gk = ev.g(xk)
        val = f
        grad = gf.copy()
        if ck.size:
            val += lam @ ck + 0.5 * rho * ck @ ck
            grad += ev.jc(xk).T @ (lam + rho * ck)
        if gk.size:
            s = np.maximum(0.0, mu + rho * gk)
            val += (s @ s - mu @ mu) / (2.0 * rho)
            active = s > 0
            if np.any(active):
                grad += ev.jg(xk)[active].T @ s[active]
        if not np.isfinite(val):
            return np.inf, np.zeros_like(xk)
        return val, grad

    v_prev = infeas(c, g, mu, rho)
    eta = max(options.feasibility_tol, 0.1)
    total_inner = 0
    stationarity = np.inf
    message = ""
    outer = 0
    for outer in range(1, options.max_outer + 1):
        history: list = []

        def cb(xk, lam=lam, mu=mu, rho=rho, history=history):
            if options.record_trace:
                history.append(merit_and_grad(xk, lam, mu, rho)[0])

        if options.record_trace:
            history.append(merit_and_grad(x, lam, mu, rho)[0])
        res = optimize.minimize(
            merit_and_grad,
            x,
            args=(lam, mu, rho),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            callback=cb,
            options={"maxiter": options.max_inner, "gtol": 1e-12, "ftol": 1e-15, "maxcor": 30},
        )
        x = res.x
        total_inner += res.nit
        if options.record_trace:
            trace.append({"outer": outer, "rho": rho, "merit": history})
        c = ev.c(x)
        g = ev.g(x)
        v = infeas(c, g, mu, rho)
        # first-order multiplier update
        lam = lam + rho * c
        mu = np.maximum(0.0, mu + rho * g)
        grad_l = ev.grad(x)
        if c.size:
            grad_l = grad_l + ev.jc(x).T @ lam
        if g.size and np.any(mu > 0):
            grad_l = grad_l + ev.jg(x)[mu > 0].T @ mu[mu > 0]
        stationarity = _projected_gradient(x, grad_l, lower, upper)
        ve, vi = ev.violations(x)
        log.debug("auglag outer %d rho=%.1e viol=%.2e stat=%.2e", outer, rho, max(ve, vi), stationarity)
        if max(ve, vi) <= options.feasibility_tol and stationarity <= options.stationarity_tol:
            message = "KKT tolerances met"
            break
        if v > max(0.25 * v_prev, options.feasibility_tol) and v > eta:
            if rho >= options.max_penalty:
                message = "penalty limit reached"
                break
            rho = min(rho * options.penalty_growth, options.max_penalty)
        else:
            eta = max(eta * 0.1, options.feasibility_tol)
        v_prev = v
    else:
        message = "outer iteration limit"
    return _finish(ev, x, total_inner, stationarity, options, message, trace)


def _solve_sqp(ev: _Evaluator, x0, options: SolverOptions) -> NlpResult:
    lower, upper = ev.p.lower, ev.p.upper
    cons = []
    if ev.p.eq_constraints is not None:
        cons.append({"type": "eq", "fun": ev.c, "jac": ev.jc})
    if ev.p.ineq_constraints is not None:
        cons.append({"type": "ineq", "fun": lambda x: -ev.g(x), "jac": lambda x: -ev.jg(x)})
    bounds = optimize.Bounds(lower, upper) if np.any(np.isfinite(lower) | np.isfinite(upper)) else None
    trace: list = []
    history: list = [ev.f(x0)] if options.record_trace else []

    def cb(xk):
        if options.record_trace:
            history.append(ev.f(xk))

    res = optimize.minimize(
        ev.f,
        x0,
        jac=ev.grad,
        method="SLSQP",
        bounds=bounds,
        constraints=cons,
        callback=cb,
        options={"maxiter": options.max_outer * 5, "ftol": options.sqp_ftol},
    )
    x = np.clip(res.x, lower, upper)
    if options.record_trace:
        trace.append({"outer": 1, "merit": history})
    stationarity = _sqp_stationarity(ev, x, lower, upper)
    return _finish(ev, x, res.nit, stationarity, options, str(res.message), trace)


def _sqp_stationarity(ev: _Evaluator, x, lower, upper) -> float:
    """KKT residual with least-squares multipliers for equalities and active inequalities."""
    grad = ev.grad(x)
    rows = []
    if ev.p.eq_constraints is not None:
        rows.append(ev.jc(x))
    if ev.p.ineq_constraints is not None:
        g = ev.g(x)
        active = g > -1e-7 * (1.0 + np.abs(g))
        if np.any(active):
            rows.append(ev.jg(x)[active])
    at_bound = (x <= lower + 1e-12) | (x >= upper - 1e-12)
    if np.any(at_bound):
        rows.append(np.eye(x.size)[at_bound])
    if not rows:
        return float(np.max(np.abs(grad)))
    J = np.vstack(rows)
    if J.shape[0] == 0:
        return float(np.max(np.abs(grad)))
    m, *_ = np.linalg.lstsq(J.T, -grad, rcond=None)
    r = grad + J.T @ m
    return float(np.max(np.abs(r))) / max(1.0, float(np.max(np.abs(grad))))


def solve_condensed(problem: NlpProblem, initial_guess, dependent, options: SolverOptions | None = None,
                    newton_tol: float = 1e-12, max_newton: int = 30) -> NlpResult:
    """SQP on the variables left free once the equalities are solved for ``dependent``.

    ``dependent`` lists as many variables as there are equality rows, with a nonsingular
    equality Jacobian block. Every function evaluation first solves ``c(y, w) = 0`` for the
    dependent part ``y`` by Newton's method (warm started), and derivatives follow from the
    implicit function theorem. Bounds on dependent variables become inequalities. This pays
    off when few variables remain, e.g. controls of a collocated trajectory with a fixed
    initial state.

    Raises
    ------
    ValueError
        If the sizes do not match or no equality constraints exist.
    """
    options = options or SolverOptions()
    ev = _Evaluator(problem, options)
    x0 = np.clip(np.asarray(initial_guess, dtype=float).ravel(), problem.lower, problem.upper)
    if x0.size != problem.dim:
        raise ValueError(f"initial guess has length {x0.size}, problem dim is {problem.dim}")
    dep = np.asarray(dependent, dtype=int)
    mask = np.zeros(problem.dim, dtype=bool)
    mask[dep] = True
    ind = np.flatnonzero(~mask)
    m = ev.c(x0).size
    if m == 0 or m != dep.size or mask.sum() != dep.size or ind.size == 0:
        raise ValueError("dependent variables must match the equality rows one to one and leave free variables")
    lo_d, hi_d = problem.lower[dep], problem.upper[dep]
    has_lo, has_hi = np.isfinite(lo_d), np.isfinite(hi_d)
    state = {"x": x0.copy(), "key": None}

    def lift(w):
        key = w.tobytes()
        if key == state["key"]:
            return state
        x = state["x"].copy()
        x[ind] = w
        for _ in range(max_newton):
            c = ev.c(x)
            if not np.all(np.isfinite(c)):
                raise EvaluationError("equalities are not finite")
            if np.max(np.abs(c)) <= newton_tol:
                break
            x[dep] -= np.linalg.solve(ev.jc(x)[:, dep], c)
        else:
            if np.max(np.abs(ev.c(x))) > 1e3 * newton_tol:
                raise EvaluationError("Newton on the equalities did not converge")
        J = ev.jc(x)
        sens = -lu_solve(lu_factor(J[:, dep]), J[:, ind])  # dy/dw
        state.update(x=x, key=key, sens=sens)
        return state

    def x_of(w):
        return lift(w)["x"]

    def f(w):
        return ev.f(x_of(w))

    def grad(w):
        st_ = lift(w)
        gx = ev.grad(st_["x"])
        return gx[ind] + gx[dep] @ st_["sens"]

    def g(w):
        x = x_of(w)
        return np.concatenate([ev.g(x), (lo_d - x[dep])[has_lo], (x[dep] - hi_d)[has_hi]])

    def jg(w):
        st_ = lift(w)
        x, S = st_["x"], st_["sens"]
        J = ev.jg(x)
        rows = [J[:, ind] + J[:, dep] @ S] if J.shape[0] else []
        rows.append(-S[has_lo])
        rows.append(S[has_hi])
        return np.vstack(rows)

    w0 = x0[ind]
    try:
        lift(w0)
    except (EvaluationError, np.linalg.LinAlgError) as exc:
        raise EvaluationError(f"cannot solve the equalities at the initial point: {exc}") from None
    has_ineq = g(w0).size > 0
    reduced = NlpProblem(dim=ind.size, objective=f, gradient=grad, ineq_constraints=g if has_ineq else None,
                         ineq_jacobian=jg if has_ineq else None, lower=problem.lower[ind], upper=problem.upper[ind])
    rev = _Evaluator(reduced, options)
    rev.sign = 1.0  # f already carries the problem's sign
    try:
        res = _solve_sqp(rev, w0, options)
        w = res.solution
        x = x_of(w)
        nit, message = res.iterations, "condensed: " + res.message
    except (EvaluationError, np.linalg.LinAlgError) as exc:
        x, nit, message = state["x"].copy(), -1, f"condensed: {exc}"
    x = np.clip(x, problem.lower, problem.upper)
    stationarity = _sqp_stationarity(ev, x, problem.lower, problem.upper)
    return _finish(ev, x, nit, stationarity, options, message)


# multi-start ----------------------------------------------------------------------------


@dataclass
class StartSampler:
    """Gaussian perturbations of a nominal point; start 0 is the nominal itself.

    Start ``i`` depends only on ``(seed, i)``, so a run with more starts extends one with fewer.
    """

    nominal: np.ndarray
    radius: float | np.ndarray = 1.0
    seed: int = 0
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def sample(self, index: int) -> np.ndarray:
        x = np.asarray(self.nominal, dtype=float).copy()
        if index > 0:
            rng = np.random.default_rng([int(self.seed), int(index)])
            x = x + np.asarray(self.radius) * rng.standard_normal(x.size)
        lo = -np.inf if self.lower is None else self.lower
        hi = np.inf if self.upper is None else self.upper
        return np.clip(x, lo, hi)


def _better(a: NlpResult, b: NlpResult, sign: float, tol: float) -> bool:
    """True when ``a`` should replace the incumbent ``b`` (ties keep the lower index)."""
    fa, fb = a.max_violation <= tol, b.max_violation <= tol
    if fa != fb:
        return fa
    if not fa:
        return a.max_violation < b.max_violation
    return sign * a.objective_value < sign * b.objective_value - 1e-12 * max(1.0, abs(b.objective_value))


def multistart_solve(
    problem: NlpProblem,
    starts: int,
    sampler: StartSampler,
    options: SolverOptions | None = None,
    workers: int = 1,
    acceptance_tol: float | None = None,
) -> NlpResult:
    """Run :func:`solve` from ``starts`` sampled points and keep the best feasible result.

    ``acceptance_tol`` is the violation below which a result counts as feasible for the
    selection (defaults to ``options.feasibility_tol``). The winner's ``trace`` holds the
    per-start objective values and violations.
    """
    options = options or SolverOptions()
    if starts < 1:
        raise ValueError("starts must be >= 1")
    tol = options.feasibility_tol if acceptance_tol is None else acceptance_tol

    def run(i):
        try:
            r = solve(problem, sampler.sample(i), options)
        except (EvaluationError, FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            if isinstance(exc, ValueError) and "initial guess" in str(exc):
                raise
            return i, exc
        r.start_index = i
        return i, r

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, range(starts)))
    else:
        outcomes = [run(i) for i in range(starts)]

    best: NlpResult | None = None
    per_start = []
    errors = []
    for i, r in sorted(outcomes, key=lambda t: t[0]):
        if isinstance(r, Exception):
            errors.append(r)
            per_start.append({"start": i, "error": str(r)})
            continue
        per_start.append(
            {"start": i, "objective": r.objective_value, "violation": r.max_violation, "status": r.status}
        )
        if best is None or _better(r, best, problem.sign, tol):
            best = r
    if best is None:
        raise errors[0]
    if best.max_violation > tol:
        best.status = INFEASIBLE
    elif best.status == INFEASIBLE:
        best.status = MAX_ITERATIONS
    best = replace(best, trace=per_start)
    return best
