"""Observability, gain and controllability measures computed by dynamic optimization.

Every driver builds a :class:`~ambiguity.transcription.Transcription`, solves it from several
deterministic starts and returns a :class:`MeasureReport`. Values from maximizations are
lower bounds of the true supremum (the optimizer may miss the global maximum); values from
minimizations are upper bounds.

Max-type problems are solved in deviation coordinates around the nominal trajectory. The
deviation unit starts at the tube radius and is boxed; whenever the box becomes active the
unit is enlarged and the solve is warm-started, and a final pass rescales to the value found.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .collocation import CollocationGrid, TimeMap, lgl_grid, quadrature
from .models import FourierControlSpace
from .nlp_solver import EvaluationError, NlpProblem, NlpResult, SolverOptions, _Evaluator, _finish, solve, solve_condensed
from .transcription import (
    ConstraintSet,
    DynamicsModel,
    Objective,
    OutputTube,
    Trajectory,
    TrajectoryMetric,
    Transcription,
    _pow2_scale,
    collocate,
    resimulation_residual,
    simulate,
)

log = logging.getLogger(__name__)

OBS_AMBIGUITY = "obs_ambiguity"
LEAST_OBS_DIRECTION = "least_obs_direction"
LP_GAIN = "lp_gain"
GRAMIAN_GAIN = "gramian_gain"
CONTROL_AMBIGUITY = "control_ambiguity"
CONTROL_COST = "control_cost"
MEASURE_KINDS = (OBS_AMBIGUITY, LEAST_OBS_DIRECTION, LP_GAIN, GRAMIAN_GAIN, CONTROL_AMBIGUITY, CONTROL_COST)

RESIMULATION_TOL = 1e-4
DEFAULT_PSI = (10.0, 1e2, 1e3, 1e4)


class IllConditionedBasisError(ValueError):
    """The input basis has a singular gram matrix."""


@dataclass
class MeasureSettings:
    """Numerical settings shared by the drivers.

    ``start_radius`` is the size of start perturbations in units of the problem's initial
    deviation scale (the tube radius, the input size, or 1 for control problems).
    ``acceptance_tol`` bounds the constraint violation, evaluated on the plain
    (non-centered) transcription, that a candidate must meet to be reported.
    ``condensed`` eliminates the node states through the defect equations before SQP; the
    default (``None``) condenses only the control-ambiguity solves, where few controls remain.
    """

    starts: int = 4
    seed: int = 0
    workers: int = 1
    start_radius: float = 1.0
    deviation_bound: float = 64.0
    max_stages: int = 10
    acceptance_tol: float = 1e-6
    condensed: Optional[bool] = None
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(method="sqp"))

    def __post_init__(self):
        if int(self.starts) != self.starts or self.starts < 1:
            raise ValueError("starts must be a positive integer")
        if not self.start_radius > 0 or not self.deviation_bound > 1:
            raise ValueError("start_radius must be positive and deviation_bound > 1")


@dataclass
class MeasureReport:
    measure_kind: str
    value: float
    sensitivity_ratio: Optional[float]
    worst_trajectory: Optional[Trajectory]
    nominal_trajectory: Optional[Trajectory]
    solver: dict
    lower_bound_flag: bool
    feasibility: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.measure_kind not in MEASURE_KINDS:
            raise ValueError(f"unknown measure kind {self.measure_kind!r}")
        if not self.value >= 0:
            raise ValueError("measure values are nonnegative")

    @property
    def bound(self) -> str:
        if self.measure_kind == GRAMIAN_GAIN:
            return "approximation"
        return "lower" if self.lower_bound_flag else "upper"


# --- helpers -----------------------------------------------------------------------------


@dataclass
class _Candidate:
    index: int
    value: float
    trajectory: Optional[Trajectory]
    result: Optional[NlpResult]
    feasibility: dict
    stages: list
    extra: dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def accepted(self) -> bool:
        return self.error is None and self.feasibility.get("accepted", False)


def _settings(settings):
    return settings if settings is not None else MeasureSettings()


def _solver_summary(result: Optional[NlpResult]) -> dict:
    return {} if result is None else result.summary()


def verify_trajectory(tr: Transcription, traj: Trajectory, tol: float) -> dict:
    """Independent feasibility check of a reported trajectory.

    Constraint rows are evaluated on ``tr`` (built without deviation coordinates) and the
    trajectory is re-integrated with the adaptive reference integrator.
    """
    z = tr.encode(traj)
    g = tr.ineq(z)
    c = tr.eq(z)
    lo, hi = tr.bounds()
    box = np.concatenate([np.maximum(0.0, lo - z), np.maximum(0.0, z - hi)])
    viol = max(
        float(np.max(np.abs(c))) if c.size else 0.0,
        float(np.max(g)) if g.size else 0.0,
        float(np.max(box)) if box.size else 0.0,
        0.0,
    )
    try:
        resim = resimulation_residual(tr.model, traj)
    except (RuntimeError, FloatingPointError) as exc:
        log.warning("re-simulation failed: %s", exc)
        resim = float("inf")
    out = {
        "max_violation": viol,
        "resimulation_residual": resim,
        "constraints_ok": viol <= tol,
        "resimulation_ok": resim <= RESIMULATION_TOL,
        "tube_values": [float(v) for v in tr.tube_values(z)],
    }
    out["accepted"] = out["constraints_ok"]
    out["verified"] = out["constraints_ok"] and out["resimulation_ok"]
    return out


def _project(tr: Transcription, z, tol: float, max_iter: int = 20):
    """Minimum-norm Gauss-Newton steps onto the violated constraints; ``None`` on failure.

    Inequalities that were violated once stay in the working set (pinned at their current
    value when already satisfied) so that fixing one row cannot undo another.
    """
    prob = tr.problem()
    y = np.asarray(z, dtype=float).copy()
    working = None
    for _ in range(max_iter):
        c = np.atleast_1d(prob.eq_constraints(y)) if prob.eq_constraints else np.zeros(0)
        g = np.atleast_1d(prob.ineq_constraints(y)) if prob.ineq_constraints else np.zeros(0)
        if max(np.max(np.abs(c), initial=0.0), np.max(g, initial=0.0)) <= tol:
            return y
        working = g > 0.1 * tol if working is None else working | (g > 0.1 * tol)
        rows, res = [], []
        if c.size:
            rows.append(np.atleast_2d(prob.eq_jacobian(y)))
            res.append(c)
        if np.any(working):
            rows.append(np.atleast_2d(prob.ineq_jacobian(y))[working])
            res.append(np.maximum(g[working], 0.0))
        step = np.linalg.lstsq(np.vstack(rows), -np.concatenate(res), rcond=None)[0]
        y = np.clip(y + step, prob.lower, prob.upper)
        if not np.all(np.isfinite(y)):
            return None
    return None


def _restore(tr: Transcription, z, options: SolverOptions) -> NlpResult:
    """Nearest feasible point to ``z`` in decision coordinates.

    Tries cheap minimum-norm projection first and falls back to solving the
    nearest-point problem with SQP.
    """
    base = tr.problem()
    target = np.asarray(z, dtype=float).copy()
    prob = NlpProblem(
        dim=base.dim,
        objective=lambda y: 0.5 * float(np.sum((y - target) ** 2)),
        gradient=lambda y: y - target,
        eq_constraints=base.eq_constraints,
        ineq_constraints=base.ineq_constraints,
        eq_jacobian=base.eq_jacobian,
        ineq_jacobian=base.ineq_jacobian,
        lower=base.lower,
        upper=base.upper,
    )
    y = _project(tr, target, options.feasibility_tol)
    if y is not None:
        return _finish(_Evaluator(prob, options), y, 0, 0.0, options, "projected onto the constraints")
    return solve(prob, target, replace(options, method="sqp"))


def _solve_transcribed(tr: Transcription, z0, settings: MeasureSettings, condense_default: bool = False) -> NlpResult:
    """Condensed SQP when requested and the node states can be eliminated, else full-space SQP."""
    options = settings.solver
    condense = condense_default if settings.condensed is None else settings.condensed
    dep = tr.dependent_indices() if condense and options.method == "sqp" else None
    if dep is not None and dep.size < tr.dim:
        try:
            return solve_condensed(tr.problem(), z0, dep, options)
        except (EvaluationError, ValueError, np.linalg.LinAlgError) as exc:
            log.info("condensed solve unavailable (%s); solving in full space", exc)
    return solve(tr.problem(), z0, options)


def _staged_maximize(build: Callable, start: Trajectory, d0: float, settings: MeasureSettings):
    """Maximize with an adaptive deviation unit; returns ``(result, transcription, trajectory, stages)``.

    The box grows while it binds. An interior optimum is only rescaled when its deviations are
    tiny in the current unit, so estimands much smaller than the deviations (a final state, say)
    do not shrink the box again.
    """
    d = float(d0)
    B = settings.deviation_bound
    traj = start
    stages = []
    result = tr = None
    kick = None
    for stage in range(settings.max_stages):
        tr = build(d, B)
        z0 = tr.encode(traj)
        if kick is not None:
            z0 = z0.copy()
            z0[:tr.n_core] += kick
            kick = None
        result = _solve_transcribed(tr, z0, settings)
        z = result.solution
        value = tr.objective_metric(z)
        traj = tr.decode(z)
        active = tr.box_active(z)
        dev = float(np.max(np.abs(z[:tr.n_core]), initial=0.0))
        stages.append({"stage": stage, "unit": d, "value": value, "deviation": dev, "status": result.status,
                       "iterations": result.iterations, "violation": result.max_violation, "box_active": active})
        if active:
            d = max(value, d * B / 4.0)
            continue
        if dev < 1e-6:
            # the unperturbed reference is stationary; restart once from a fixed off-center point
            if any(st.get("kicked") for st in stages):
                break
            stages[-1]["kicked"] = True
            kick = 0.5 * np.random.default_rng(0).uniform(-1.0, 1.0, tr.n_core)
            continue
        if dev < 0.125:
            d *= dev
            continue
        break
    if result.max_violation > settings.solver.feasibility_tol:
        fixed = _restore(tr, result.solution, settings.solver)
        if fixed.max_violation < result.max_violation:
            stages.append({"stage": "restore", "violation": fixed.max_violation, "status": fixed.status})
            restored = tr.problem()
            result = replace(result, solution=fixed.solution,
                             objective_value=float(restored.objective(fixed.solution)),
                             max_eq_violation=fixed.max_eq_violation, max_ineq_violation=fixed.max_ineq_violation,
                             total_violation=fixed.total_violation)
            traj = tr.decode(fixed.solution)
    return result, tr, traj, stages


def _run_starts(run_one: Callable[[int], _Candidate], settings: MeasureSettings, maximize: bool, key=None):
    """Evaluate all starts and pick the best accepted candidate (ties keep the lowest index).

    ``key`` maps a candidate to a sortable score (smaller is better) and overrides ``maximize``.
    """

    def safe(i):
        try:
            return run_one(i)
        except (FloatingPointError, RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
            if isinstance(exc, ValueError) and getattr(exc, "fatal", False):
                raise
            log.info("start %d failed: %s", i, exc)
            return _Candidate(i, 0.0, None, None, {}, [], error=f"{type(exc).__name__}: {exc}")

    if settings.workers > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            cands = list(pool.map(safe, range(settings.starts)))
    else:
        cands = [safe(i) for i in range(settings.starts)]
    best = None
    for c in sorted(cands, key=lambda c: c.index):
        if not c.accepted:
            continue
        if key is not None:
            better = best is None or key(c) < key(best)
        else:
            better = best is None or (c.value > best.value if maximize else c.value < best.value)
        if better:
            best = c
    per_start = [
        {"start": c.index, "value": c.value, "accepted": c.accepted, "error": c.error,
         "status": None if c.result is None else c.result.status}
        for c in sorted(cands, key=lambda c: c.index)
    ]
    return best, per_start


def _smooth_noise(rng, n_channels, times, t0, t1, terms=3):
    """Random low-frequency signals at ``times``, unit scale."""
    tau = (np.asarray(times) - t0) / (t1 - t0)
    out = np.zeros((n_channels, tau.size))
    for c in range(n_channels):
        a = rng.standard_normal(terms) / np.sqrt(terms)
        ph = rng.uniform(0, 2 * np.pi, terms)
        for j in range(terms):
            out[c] += a[j] * np.cos(np.pi * j * tau + ph[j])
    return out


def _perturbed_reference(model, nominal: Trajectory, constraints: ConstraintSet, radius: float, rng,
                         control_channels=None, global_params=False) -> Trajectory:
    """Simulate from perturbed free data (initial state, parameters, free controls)."""
    x0 = nominal.states[:, 0].copy()
    if isinstance(constraints.initial_state, str) and constraints.initial_state == "free":
        x0 = x0 + radius * _pow2_scale(nominal.states, axis=1) * rng.standard_normal(model.state_dim)
    elif not isinstance(constraints.initial_state, str):
        x0 = np.asarray(constraints.initial_state, dtype=float).copy()
    p = nominal.params.copy()
    if constraints.param_box is not None and model.param_dim:
        lo = np.broadcast_to(np.asarray(constraints.param_box[0], float), p.shape)
        hi = np.broadcast_to(np.asarray(constraints.param_box[1], float), p.shape)
        free = lo < hi
        if global_params:
            p = np.where(free, rng.uniform(lo, hi), lo)
        else:
            step = radius * _pow2_scale(np.abs(p)[:, None], axis=1) * rng.standard_normal(p.size)
            p = np.where(free, np.clip(p + step, lo, hi), lo)
    U = nominal.controls.copy()
    if model.control_dim:
        chans = range(model.control_dim) if constraints.free_controls is None else constraints.free_controls
        chans = [c for c in chans if control_channels is None or c in control_channels]
        if chans:
            noise = _smooth_noise(rng, len(chans), nominal.times, nominal.time_map.t0, nominal.time_map.t1)
            sc = _pow2_scale(nominal.controls, axis=1)
            for j, c in enumerate(chans):
                U[c] = U[c] + radius * sc[c] * noise[j]
    return simulate(model, x0, nominal.time_map, nominal.grid, control=U if model.control_dim else None, params=p)


def _start_rng(settings: MeasureSettings, index: int):
    return np.random.default_rng([int(settings.seed), int(index)])


def _as_collocated(model: DynamicsModel, nominal: Trajectory, tol: float = 1e-10) -> Trajectory:
    """Project ``nominal`` onto the collocation equations when its defects exceed ``tol``."""
    D = nominal.grid.diff_matrix
    f = model.f(nominal.times, nominal.states, nominal.controls, nominal.params)
    defect = (nominal.states @ D.T - nominal.time_map.scale * f)[:, 1:]
    if float(np.max(np.abs(defect))) <= tol * max(1.0, float(np.max(np.abs(nominal.states)))):
        return nominal
    return collocate(model, nominal.states[:, 0], nominal.time_map, nominal.grid,
                     control=nominal.controls if model.control_dim else None, params=nominal.params)


def _check_nominal(tr: Transcription, nominal: Trajectory, tol: float):
    feas = verify_trajectory(tr, nominal, tol)
    if not feas["constraints_ok"]:
        exc = ValueError(f"nominal trajectory violates its constraints by {feas['max_violation']:.3g}")
        exc.fatal = True
        raise exc
    return feas


def _norm(eps) -> float:
    return float(np.linalg.norm(np.atleast_1d(np.asarray(eps, dtype=float))))


# --- observability ---------------------------------------------------------------------


def _tube(epsilon, metric: TrajectoryMetric, channels, signal="output"):
    eps = np.atleast_1d(np.asarray(epsilon, dtype=float))
    if np.any(~(eps > 0)) or np.any(~np.isfinite(eps)):
        exc = ValueError("tube radii must be positive and finite")
        exc.fatal = True
        raise exc
    return OutputTube(eps if eps.size > 1 else float(eps[0]), metric, channels, signal)


def _maximization_report(kind, model, nominal, objective, constraints, d0, settings, ratio_den,
                         perturb=None, extra_details=None):
    settings = _settings(settings)
    nominal = _as_collocated(model, nominal)
    check_tr = Transcription(model, nominal, objective, constraints)
    _check_nominal(check_tr, nominal, settings.acceptance_tol)

    def build(d, B):
        return Transcription(model, nominal, objective, constraints, objective_scale=1.0 / d**2,
                             deviation_scale=d, deviation_bound=B)

    def run_one(i):
        if i == 0:
            start = nominal
        elif perturb is not None:
            start = perturb(i)
        else:
            start = _perturbed_reference(model, nominal, constraints, settings.start_radius * d0, _start_rng(settings, i))
        result, tr, traj, stages = _staged_maximize(build, start, d0, settings)
        feas = verify_trajectory(check_tr, traj, settings.acceptance_tol)
        value = check_tr.objective_metric(check_tr.encode(traj))
        return _Candidate(i, value, traj, result, feas, stages)

    best, per_start = _run_starts(run_one, settings, maximize=True)
    if best is None:
        raise RuntimeError("no start produced a feasible trajectory, not even the nominal")
    details = {"starts": per_start, "stages": best.stages, "start_index": best.index}
    if extra_details:
        details.update(extra_details)
    return MeasureReport(kind, best.value, best.value / ratio_den if ratio_den else None, best.trajectory, nominal,
                         _solver_summary(best.result), True, best.feasibility, details)


def observability_ambiguity(
    model: DynamicsModel,
    nominal: Trajectory,
    epsilon,
    y_metric: TrajectoryMetric = TrajectoryMetric("Linf"),
    z_metric: TrajectoryMetric = TrajectoryMetric("initial_value_norm"),
    constraints: ConstraintSet | None = None,
    settings: MeasureSettings | None = None,
    output_channels: Sequence[int] | None = None,
    estimand: str | Callable = "state",
    estimand_channels: Sequence[int] | None = None,
) -> MeasureReport:
    """Largest estimand deviation among trajectories whose output stays in the epsilon-tube.

    Parameters
    ----------
    epsilon : float or sequence
        Tube radius; a sequence gives one tube per output channel.
    y_metric, z_metric : TrajectoryMetric
        Output-tube metric and estimand metric. The default estimand is the initial state.
    constraints : ConstraintSet, optional
        Additional knowledge (bounds, parameter box, free controls, variation bounds). Its
        ``output_tubes`` are kept and the epsilon-tube is appended. By default the initial
        state is free and everything else is fixed to the nominal.
    """
    cs = replace(constraints) if constraints is not None else ConstraintSet(initial_state="free")
    cs.output_tubes = list(cs.output_tubes) + [_tube(epsilon, y_metric, output_channels)]
    objective = Objective(z_metric, "maximize", estimand, estimand_channels)
    d0 = float(np.max(np.atleast_1d(epsilon)))
    return _maximization_report(OBS_AMBIGUITY, model, nominal, objective, cs, d0, settings, _norm(epsilon),
                                extra_details={"epsilon": np.atleast_1d(epsilon).tolist()})


def detectability_ambiguity(model, nominal, epsilon, y_metric=TrajectoryMetric("Linf"), constraints=None,
                            settings=None, output_channels=None) -> MeasureReport:
    """Ambiguity of the final state ``x(t_f)`` under the epsilon output tube."""
    return observability_ambiguity(model, nominal, epsilon, y_metric, TrajectoryMetric("final_value_norm"),
                                   constraints, settings, output_channels, "state")


def least_observable_direction(
    model: DynamicsModel,
    nominal: Trajectory,
    rho: float,
    y_metric: TrajectoryMetric = TrajectoryMetric("L2"),
    settings: MeasureSettings | None = None,
    output_channels: Sequence[int] | None = None,
    constraints: ConstraintSet | None = None,
) -> MeasureReport:
    """Smallest output deviation over initial states on the sphere of radius ``rho``.

    The sphere is the equality ``|x0_hat - x0|^2 = rho^2``. The report's ratio is
    ``rho / value``, the unobservability along the minimizing direction.
    """
    settings = _settings(settings)
    if not rho > 0:
        raise ValueError("rho must be positive")
    if y_metric.kind == "Linf":
        raise ValueError("least observable direction needs a quadratic output metric")
    nominal = _as_collocated(model, nominal)
    cs = replace(constraints) if constraints is not None else ConstraintSet()
    cs.initial_state = "free"
    cs.initial_sphere = float(rho)
    objective = Objective(y_metric, "minimize", "output", output_channels)
    n = model.state_dim

    def run_one(i):
        rng = _start_rng(settings, i)
        if i == 0:
            v = np.zeros(n)
            v[-1] = 1.0
        else:
            v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        start = simulate(model, nominal.states[:, 0] + rho * v, nominal.time_map, nominal.grid,
                         control=nominal.controls if model.control_dim else None, params=nominal.params)
        ref_tr = Transcription(model, nominal, objective, cs)
        f0 = ref_tr.objective_metric(ref_tr.encode(start)) ** 2
        tr = Transcription(model, nominal, objective, cs, objective_scale=1.0 / max(f0, 1e-300),
                           deviation_scale=rho)
        result = solve(tr.problem(), tr.encode(start), settings.solver)
        traj = tr.decode(result.solution)
        feas = verify_trajectory(ref_tr, traj, settings.acceptance_tol)
        value = ref_tr.objective_metric(ref_tr.encode(traj))
        direction = (traj.states[:, 0] - nominal.states[:, 0]) / rho
        return _Candidate(i, value, traj, result, feas, [], {"direction": direction})

    best, per_start = _run_starts(run_one, settings, maximize=False)
    if best is None:
        raise RuntimeError("no start reached the sphere within tolerance")
    details = {"starts": per_start, "start_index": best.index, "rho": rho,
               "direction": best.extra["direction"].tolist(), "initial_state": best.trajectory.states[:, 0].tolist()}
    ratio = rho / best.value if best.value > 0 else float("inf")
    return MeasureReport(LEAST_OBS_DIRECTION, best.value, ratio, best.trajectory, nominal,
                         _solver_summary(best.result), False, best.feasibility, details)


# --- gains ---------------------------------------------------------------------------------


def _paired_model(model: DynamicsModel, space: FourierControlSpace, channel: int) -> DynamicsModel:
    """States ``[x, x*]`` driven with and without the disturbance; params ``[coefficients, mu]``."""
    n = model.state_dim
    m = space.dim
    if not 0 <= channel < model.control_dim:
        raise ValueError(f"disturbance channel {channel} does not exist")

    def rhs(t, X, U, P):
        U = np.asarray(U, dtype=float)
        w = space.evaluate(P[:m], t)
        Uw = U.copy()
        Uw[channel] = Uw[channel] + w
        mu = P[m:]
        return np.vstack([model.f(t, X[:n], Uw, mu), model.f(t, X[n:], U, mu)])

    def deviation(t, X, U, P):
        mu = P[m:]
        w = space.evaluate(P[:m], t)
        Uw = np.asarray(U, dtype=float).copy()
        Uw[channel] = Uw[channel] + w
        return model.e(t, X[:n], Uw, mu) - model.e(t, X[n:], U, mu)

    return DynamicsModel(
        name=f"{model.name}-paired",
        state_dim=2 * n,
        control_dim=model.control_dim,
        param_dim=m + model.param_dim,
        rhs=rhs,
        estimand=deviation,
        estimand_dim=model.estimand_dim,
        output=lambda t, X, U, P: X[:n],
        output_dim=n,
        params=np.concatenate([np.zeros(m), model.params]),
        info={"base": model, "space": space, "channel": channel},
    )


def lp_gain(
    model: DynamicsModel,
    nominal: Trajectory,
    input_space: FourierControlSpace,
    sigma: float,
    p: float = 2,
    param_box: tuple | None = None,
    settings: MeasureSettings | None = None,
    disturbance_channel: int | None = None,
    normalized: bool = False,
) -> MeasureReport:
    """Worst-case ratio of estimand deviation to input size over a two-frequency input space.

    Parameters
    ----------
    nominal : Trajectory
        Undisturbed trajectory from a fixed initial state; its grid is used.
    param_box : (lower, upper), optional
        Box for the model parameters (shared by the disturbed and undisturbed copies).
    disturbance_channel : int, optional
        Control channel the disturbance adds to; defaults to the last one.
    normalized : bool
        Use the ``1/(t_f - t_0)``-normalized L2 norm for both the input and the deviation.
        The gain is a ratio, so this only changes what ``sigma`` measures.
    """
    settings = _settings(settings)
    if input_space.dim == 0:
        raise ValueError("input space is empty")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if p not in (2, np.inf, float("inf"), "inf"):
        raise ValueError("p must be 2 or inf")
    p_inf = p != 2
    ch = model.control_dim - 1 if disturbance_channel is None else int(disturbance_channel)
    pm = _paired_model(model, input_space, ch)
    m = input_space.dim
    nominal = _as_collocated(model, nominal)
    x0 = nominal.states[:, 0]
    reference = Trajectory(nominal.grid, nominal.time_map, np.vstack([nominal.states, nominal.states]),
                           nominal.controls, np.concatenate([np.zeros(m), nominal.params]))
    cbox = 2.0 * sigma * np.ones(m)
    if param_box is None:
        plo = phi = nominal.params
    else:
        plo = np.broadcast_to(np.asarray(param_box[0], float), nominal.params.shape)
        phi = np.broadcast_to(np.asarray(param_box[1], float), nominal.params.shape)
    box = (np.concatenate([-cbox, plo]), np.concatenate([cbox, phi]))
    G = input_space.gram(normalized=normalized)
    cs = ConstraintSet(initial_state=np.concatenate([x0, x0]), param_box=box, free_controls=[])
    if p_inf:
        times = nominal.times

        def path(t, X, U, P):
            w = input_space.evaluate(P[:m], t)
            return np.vstack([w / sigma - 1.0, -w / sigma - 1.0])

        cs.path = path
        z_metric = TrajectoryMetric("L2")
    else:
        cs.param_ineq = lambda P: np.array([P[:m] @ G @ P[:m] / sigma**2 - 1.0])
        z_metric = TrajectoryMetric("L2", time_normalized=normalized)

    def perturb_factory(i):
        rng = _start_rng(settings, i)
        c = rng.standard_normal(m)
        c *= settings.start_radius * sigma / np.sqrt(c @ G @ c)
        mu = rng.uniform(plo, phi) if param_box is not None else nominal.params
        mu = np.where(plo < phi, mu, plo)
        return simulate(pm, np.concatenate([x0, x0]), nominal.time_map, nominal.grid,
                        control=nominal.controls if model.control_dim else None,
                        params=np.concatenate([np.minimum(c, cbox), mu]))

    if not p_inf:
        objective = Objective(z_metric, "maximize", "estimand", reference="zero")
        rep = _maximization_report(LP_GAIN, pm, reference, objective, cs, sigma, settings, 0.0, perturb_factory)
        max_dev = rep.value
    else:
        # sup norm: maximize the deviation at each node separately
        best = None
        q = TrajectoryMetric("L2").node_weights(nominal.grid, nominal.time_map)
        for k in range(1, nominal.grid.node_count):
            mask = np.zeros(nominal.grid.node_count)
            mask[k] = 1.0 / np.sqrt(q[k])
            tk = times[k]

            def at_node(t, X, U, P, tk=tk, mk=mask[k]):
                d = pm.e(t, X, U, P)
                return d * np.where(np.isclose(t, tk, rtol=0, atol=1e-12), mk, 0.0)

            objective = Objective(z_metric, "maximize", at_node, reference="zero")
            rep_k = _maximization_report(LP_GAIN, pm, reference, objective, cs, sigma, settings, 0.0, perturb_factory)
            if best is None or rep_k.value > best.value:
                best = rep_k
                best.details["node"] = k
        rep = best
        max_dev = rep.value
    gamma = max_dev / sigma
    worst = rep.worst_trajectory
    coeffs = worst.params[:m]
    rep.details.update({
        "sigma": sigma,
        "p": "inf" if p_inf else 2,
        "max_deviation": max_dev,
        "coefficients": coeffs.tolist(),
        "parameters": worst.params[m:].tolist(),
        "input_norm": float(np.sqrt(coeffs @ G @ coeffs)),
        "normalized": normalized,
        "basis": [f"{kind}{k}" for kind, k in input_space.terms],
    })
    return replace(rep, value=gamma, sensitivity_ratio=gamma)


def gramian_gain(
    model: DynamicsModel,
    x0,
    input_space: FourierControlSpace,
    sigma: float,
    grid: CollocationGrid | None = None,
    control: Callable | None = None,
    disturbance_channel: int | None = None,
    time_map: TimeMap | None = None,
    params=None,
) -> MeasureReport:
    """Gain estimate from central-difference responses to ``+-sigma w_i``.

    ``G^w_ij = <sigma w_i, sigma w_j>`` and ``G^z_ij = <dz_i, dz_j>`` with
    ``2 dz_i = e(x^{i+}) - e(x^{i-})``, both under the ``1/(t_f - t_0)``-normalized inner
    product on ``grid`` (default 101 LGL nodes). Returns ``sqrt(lambda_max)`` of
    ``G^z a = lambda G^w a``.
    """
    from scipy.linalg import eigh

    if not sigma > 0:
        raise ValueError("sigma must be positive")
    grid = grid or lgl_grid(101)
    time_map = time_map or TimeMap(input_space.t0, input_space.tf)
    ch = model.control_dim - 1 if disturbance_channel is None else int(disturbance_channel)
    if not 0 <= ch < model.control_dim:
        raise ValueError(f"disturbance channel {ch} does not exist")
    times = time_map.to_time(grid.nodes)
    base = control if control is not None else (lambda t: np.zeros((model.control_dim, np.size(t))))
    basis = input_space.basis(times)
    m = input_space.dim
    dz = []
    for i in range(m):
        resp = []
        for sgn in (1.0, -1.0):
            def u(t, i=i, sgn=sgn):
                t = np.atleast_1d(np.asarray(t, dtype=float))
                out = np.asarray(base(t), dtype=float).reshape(model.control_dim, t.size).copy()
                out[ch] += sgn * sigma * input_space.basis(t)[i]
                return out

            tr = simulate(model, x0, time_map, grid, control=u, params=params)
            resp.append(model.e(times, tr.states, tr.controls, tr.params))
        dz.append(0.5 * (resp[0] - resp[1]))
    dz = np.array(dz)  # (m, n_z, K)
    norm_w = quadrature(grid, np.ones(grid.node_count), time_map)

    def inner(a, b):
        return float(quadrature(grid, np.sum(a * b, axis=0), time_map)) / norm_w

    Gz = np.array([[inner(dz[i], dz[j]) for j in range(m)] for i in range(m)])
    Gw = sigma**2 * np.array([[inner(basis[i][None], basis[j][None]) for j in range(m)] for i in range(m)])
    lam_w = np.linalg.eigvalsh(Gw)
    if lam_w[0] <= 1e-12 * max(lam_w[-1], 1e-300):
        raise IllConditionedBasisError("input basis gram matrix is singular")
    lam, vec = eigh(Gz, Gw)
    gamma = float(np.sqrt(max(lam[-1], 0.0)))
    details = {"G_w": Gw.tolist(), "G_z": Gz.tolist(), "eigenvalues": lam.tolist(),
               "worst_coefficients": (sigma * vec[:, -1] / np.sqrt(vec[:, -1] @ (Gw / sigma**2) @ vec[:, -1])).tolist(),
               "sigma": sigma, "basis": [f"{kind}{k}" for kind, k in input_space.terms]}
    nominal = simulate(model, x0, time_map, grid, control=base, params=params)
    return MeasureReport(GRAMIAN_GAIN, gamma, gamma, None, nominal, {}, False, {}, details)


# --- controllability --------------------------------------------------------------------------


def _control_reference(model, x0, time_map, grid, control, params):
    return simulate(model, x0, time_map, grid, control=control, params=params)


def _check_initial(model, x0, constraints: ConstraintSet, t0):
    x0 = np.asarray(x0, dtype=float)
    bad = False
    if constraints.state_lower is not None and np.any(x0 < np.asarray(constraints.state_lower) - 1e-12):
        bad = True
    if constraints.state_upper is not None and np.any(x0 > np.asarray(constraints.state_upper) + 1e-12):
        bad = True
    if constraints.path is not None:
        u0 = np.zeros((model.control_dim, 1))
        if np.any(np.asarray(constraints.path(np.array([t0]), x0[:, None], u0, model.params)) > 1e-12):
            bad = True
    if bad:
        exc = ValueError("initial state violates the path constraints")
        exc.fatal = True
        raise exc


def control_ambiguity(
    model: DynamicsModel,
    x0,
    x1_target,
    time_map: TimeMap,
    grid: CollocationGrid,
    constraints: ConstraintSet | None = None,
    settings: MeasureSettings | None = None,
    x_metric: TrajectoryMetric = TrajectoryMetric("final_value_norm"),
    control=None,
    params=None,
) -> MeasureReport:
    """Smallest terminal miss ``|x(t1) - x1|`` over admissible controls from ``x0``.

    ``constraints`` may bound states and controls; the initial state is always fixed.
    ``x_metric.weights`` weights the state channels (e.g. ``sqrt(dr)`` for a discretized rod).
    The ratio is the relative ambiguity ``value / |x1|``.
    """
    settings = _settings(settings)
    cs = replace(constraints) if constraints is not None else ConstraintSet()
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1_target, dtype=float).ravel()
    if x1.shape != (model.state_dim,):
        raise ValueError("target has the wrong dimension")
    _check_initial(model, x0, cs, time_map.t0)
    cs.initial_state = x0
    metric = TrajectoryMetric("final_value_norm", x_metric.weights)
    objective = Objective(metric, "minimize", "state", reference=x1)
    ref = _control_reference(model, x0, time_map, grid, control, params)
    check_tr = Transcription(model, ref, objective, cs)
    target_norm = float(np.linalg.norm(metric.channel_weights(model.state_dim) * x1))

    def run_one(i):
        start = ref if i == 0 else _perturbed_reference(model, ref, cs, settings.start_radius, _start_rng(settings, i))
        f0 = check_tr.objective_metric(check_tr.encode(start)) ** 2
        tr = Transcription(model, ref, objective, cs, objective_scale=1.0 / max(f0, 1e-12))
        result = _solve_transcribed(tr, tr.encode(start), settings, condense_default=True)
        if result.max_violation > settings.solver.feasibility_tol:
            fixed = _restore(tr, result.solution, settings.solver)
            if fixed.max_violation < result.max_violation:
                result = replace(result, solution=fixed.solution, max_eq_violation=fixed.max_eq_violation,
                                 max_ineq_violation=fixed.max_ineq_violation)
        traj = tr.decode(result.solution)
        feas = verify_trajectory(check_tr, traj, settings.acceptance_tol)
        value = check_tr.objective_metric(check_tr.encode(traj))
        return _Candidate(i, value, traj, result, feas, [])

    best, per_start = _run_starts(run_one, settings, maximize=False)
    if best is None:
        raise RuntimeError("no start produced an admissible trajectory")
    rel = best.value / target_norm if target_norm > 0 else None
    details = {"starts": per_start, "start_index": best.index, "target": x1.tolist(),
               "target_norm": target_norm, "relative_ambiguity": rel,
               "final_state": best.trajectory.states[:, -1].tolist()}
    return MeasureReport(CONTROL_AMBIGUITY, best.value, rel, best.trajectory, ref, _solver_summary(best.result),
                         False, best.feasibility, details)


def control_ambiguity_region(model, initial_states, targets, time_map, grid, constraints=None, settings=None,
                             x_metric=TrajectoryMetric("final_value_norm"), control=None, params=None) -> MeasureReport:
    """Largest control ambiguity over all sampled ``(x0, x1)`` pairs."""
    initial_states = [np.asarray(x, float) for x in initial_states]
    targets = [np.asarray(x, float) for x in targets]
    if not initial_states or not targets:
        raise ValueError("region sample sets must be nonempty")
    worst = None
    table = []
    for i, x0 in enumerate(initial_states):
        for j, x1 in enumerate(targets):
            rep = control_ambiguity(model, x0, x1, time_map, grid, constraints, settings, x_metric, control, params)
            table.append({"initial": i, "target": j, "value": rep.value, "relative": rep.sensitivity_ratio})
            if worst is None or rep.value > worst.value:
                worst = rep
                worst.details["pair"] = (i, j)
    worst.details["pairs"] = table
    return worst


def _final_residual(tr: Transcription, x1, weights):
    """``r(z) = W (x(t1) - x1)`` and its Jacobian in decision coordinates."""
    L = tr.layout
    full_idx = np.array([L.x(i, L.K - 1) for i in range(L.n_x)])
    pos = np.searchsorted(tr.free_idx, full_idx)
    is_free = (pos < tr.free_idx.size) & (tr.free_idx[np.minimum(pos, tr.free_idx.size - 1)] == full_idx)
    J = np.zeros((L.n_x, tr.dim))
    J[np.arange(L.n_x)[is_free], pos[is_free]] = weights[is_free] * tr.scale[full_idx[is_free]]

    def r(z):
        X, _, _ = tr.split(tr._full(z))
        return weights * (X[:, -1] - x1)

    return r, J


def _cost_key(c: _Candidate):
    # reached targets first, by effort; otherwise by terminal miss
    return (0, c.value) if c.extra["reached"] else (1, c.extra["miss"])


def control_cost(
    model: DynamicsModel,
    x0,
    x1,
    time_map: TimeMap,
    grid: CollocationGrid,
    u_ref=None,
    constraints: ConstraintSet | None = None,
    settings: MeasureSettings | None = None,
    psi_schedule: Sequence[float] = DEFAULT_PSI,
    u_metric: TrajectoryMetric = TrajectoryMetric("L2"),
    x_weights=None,
    params=None,
) -> MeasureReport:
    """Least control effort ``|u - u*|`` reaching ``x1`` from ``x0`` by penalty continuation.

    Each stage solves ``min a + psi b`` with ``|u - u*|^2 <= a^2`` and the terminal miss
    lifted as ``W (x(t1) - x1) = b v``, ``|v| <= 1``, which keeps the exact penalty smooth.
    Stages warm-start from the previous one. The target counts as reached when the miss
    drops below ``1e-6 (1 + |x1|)``; otherwise the value is ``inf`` and the residual is
    reported.
    """
    settings = _settings(settings)
    psi = [float(v) for v in psi_schedule]
    if not psi or any(not v > 0 for v in psi) or any(b <= a for a, b in zip(psi, psi[1:])):
        raise ValueError("psi_schedule must be an increasing sequence of positive numbers")
    cs = replace(constraints) if constraints is not None else ConstraintSet()
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float).ravel()
    n, nu = model.state_dim, model.control_dim
    if nu == 0:
        raise ValueError("control cost needs at least one control channel")
    _check_initial(model, x0, cs, time_map.t0)
    cs.initial_state = x0
    K = grid.node_count
    ustar = np.zeros((nu, K)) if u_ref is None else np.asarray(u_ref, dtype=float).reshape(nu, -1)
    if ustar.shape[1] == 1:
        ustar = np.repeat(ustar, K, axis=1)
    ref = simulate(model, x0, time_map, grid, control=ustar, params=params)
    objective = Objective(u_metric, "minimize", "control", reference=ustar)
    tr = Transcription(model, ref, objective, cs)
    w_x = np.ones(n) if x_weights is None else np.broadcast_to(np.asarray(x_weights, float), (n,)).copy()
    r_fun, Jr = _final_residual(tr, x1, w_x)
    tol = 1e-6 * (1.0 + float(np.linalg.norm(w_x * x1)))
    D = tr.dim
    dim = D + 2 + n

    def parts(y):
        return y[:D], y[D], y[D + 1], y[D + 2:]

    def stage_problem(ps):
        def f(y):
            return float(y[D] + ps * y[D + 1])

        gf = np.zeros(dim)
        gf[D] = 1.0
        gf[D + 1] = ps

        def c(y):
            z, a, b, v = parts(y)
            return np.concatenate([tr.eq(z), r_fun(z) - b * v])

        def jc(y):
            z, a, b, v = parts(y)
            top = np.hstack([tr.eq_jac(z), np.zeros((tr.eq(z).size, 2 + n))])
            bot = np.hstack([Jr, np.zeros((n, 1)), -v[:, None], -b * np.eye(n)])
            return np.vstack([top, bot])

        def g(y):
            z, a, b, v = parts(y)
            return np.concatenate([tr.ineq(z), [tr.nlp_objective(z) - a * a, v @ v - 1.0]])

        def jg(y):
            z, a, b, v = parts(y)
            Jg = tr.ineq_jac(z)
            top = np.hstack([Jg, np.zeros((Jg.shape[0], 2 + n))])
            r1 = np.concatenate([tr.nlp_gradient(z), [-2.0 * a, 0.0], np.zeros(n)])
            r2 = np.concatenate([np.zeros(D + 2), 2.0 * v])
            return np.vstack([top, r1, r2])

        lo, hi = tr.bounds()
        lower = np.concatenate([lo, [0.0, 0.0], -np.ones(n)])
        upper = np.concatenate([hi, [np.inf, np.inf], np.ones(n)])
        return NlpProblem(dim, f, "minimize", c, g, lower, upper, lambda y: gf, jc, jg)

    def lift(z):
        r = r_fun(z)
        b = float(np.linalg.norm(r))
        v = r / b if b > 0 else np.eye(n)[0]
        # a > 0 keeps the epigraph row off its degenerate point u = u*
        a = max(float(np.sqrt(max(tr.nlp_objective(z), 0.0))), b)
        return np.concatenate([z, [a, b], v])

    def run_one(i):
        start = ref if i == 0 else _perturbed_reference(model, ref, cs, settings.start_radius, _start_rng(settings, i))
        y = lift(tr.encode(start))
        stages = []
        result = None
        for ps in psi:
            result = solve(stage_problem(ps), y, settings.solver)
            y = result.solution
            z = y[:D]
            miss = float(np.linalg.norm(r_fun(z)))
            stages.append({"psi": ps, "miss": miss, "effort": tr.objective_metric(z), "status": result.status})
            if miss <= tol:
                break
        z = y[:D]
        traj = tr.decode(z)
        feas = verify_trajectory(tr, traj, settings.acceptance_tol)
        miss = float(np.linalg.norm(r_fun(z)))
        reached = miss <= tol
        value = tr.objective_metric(z) if reached else float("inf")
        return _Candidate(i, value, traj, result, feas, stages, {"miss": miss, "reached": reached})

    best, per_start = _run_starts(run_one, settings, maximize=False, key=_cost_key)
    if best is None:
        raise RuntimeError("no start produced an admissible trajectory")
    details = {"starts": per_start, "stages": best.stages, "start_index": best.index,
               "terminal_miss": best.extra["miss"], "reached": best.extra["reached"], "tolerance": tol,
               "psi_schedule": psi, "effort": tr.objective_metric(tr.encode(best.trajectory))}
    return MeasureReport(CONTROL_COST, best.value, None, best.trajectory, ref, _solver_summary(best.result),
                         False, best.feasibility, details)
