"""Direct transcription of trajectory-optimization problems on an LGL grid.

A :class:`Transcription` turns a :class:`DynamicsModel`, a reference trajectory, an
objective and a :class:`ConstraintSet` into an :class:`~ambiguity.nlp.NlpProblem`.

Decision vector layout, with fixed entries removed::

    [ states (state-major, node-minor) | controls | parameters | auxiliary ]

States, controls and parameters are scaled channel-wise by a power of two of their
reference magnitude (floor 1), so encoding and decoding are exact. Dynamics are enforced
by defect rows ``D X - s f(t, X, U, p) = 0`` at nodes ``1..N``; the initial node carries
the initial condition instead. Since no defect involves the first control node, each free
control channel gets one more row tying ``u(t_0)`` to the degree ``N - 1`` extrapolation
through the remaining nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .collocation import CollocationGrid, TimeMap, interpolate
from .nlp_solver import NlpProblem, fd_jacobian

METRIC_KINDS = ("L2", "Linf", "initial_value_norm", "final_value_norm")


@dataclass(frozen=True)
class DynamicsModel:
    """Controlled system ``xdot = f(t, x, u, p)`` with output ``y`` and estimand ``z``.

    Callbacks are vectorized over nodes: ``t`` has shape ``(K,)``, ``x`` is ``(n_x, K)``,
    ``u`` is ``(n_u, K)`` and ``p`` is ``(n_p,)``. They return ``(dim, K)`` arrays.
    ``output`` and ``estimand`` default to the full state.
    """

    name: str
    state_dim: int
    control_dim: int
    param_dim: int
    rhs: Callable
    output: Optional[Callable] = None
    estimand: Optional[Callable] = None
    output_dim: Optional[int] = None
    estimand_dim: Optional[int] = None
    params: Optional[np.ndarray] = None
    state_names: Optional[Sequence[str]] = None
    control_names: Optional[Sequence[str]] = None
    param_names: Optional[Sequence[str]] = None
    output_names: Optional[Sequence[str]] = None
    estimand_names: Optional[Sequence[str]] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("state_dim", "control_dim", "param_dim"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer")
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        if self.output is None:
            object.__setattr__(self, "output_dim", self.state_dim)
        if self.estimand is None:
            object.__setattr__(self, "estimand_dim", self.state_dim)
        if self.output_dim is None or self.estimand_dim is None:
            raise ValueError("output_dim and estimand_dim are required with custom callbacks")
        p = np.zeros(self.param_dim) if self.params is None else np.asarray(self.params, float)
        if p.shape != (self.param_dim,):
            raise ValueError(f"params must have shape ({self.param_dim},)")
        object.__setattr__(self, "params", p)

    def f(self, t, x, u, p):
        return np.asarray(self.rhs(t, x, u, p), dtype=float)

    def h(self, t, x, u, p):
        if self.output is None:
            return np.asarray(x, dtype=float)
        return np.asarray(self.output(t, x, u, p), dtype=float)

    def e(self, t, x, u, p):
        if self.estimand is None:
            return np.asarray(x, dtype=float)
        return np.asarray(self.estimand(t, x, u, p), dtype=float)

    def signal(self, which):
        """Resolve 'state', 'output', 'estimand', 'control', 'params' or a callable."""
        if callable(which):
            return which
        table = {
            "state": lambda t, x, u, p: np.asarray(x, dtype=float),
            "output": self.h,
            "estimand": self.e,
            "control": lambda t, x, u, p: np.asarray(u, dtype=float),
            "params": lambda t, x, u, p: np.repeat(np.asarray(p, float)[:, None], np.size(t), axis=1),
        }
        try:
            return table[which]
        except KeyError:
            raise ValueError(f"unknown signal {which!r}") from None


@dataclass
class Trajectory:
    """State and control values at the nodes of a grid, plus static parameters."""

    grid: CollocationGrid
    time_map: TimeMap
    states: np.ndarray
    controls: np.ndarray
    params: np.ndarray

    def __post_init__(self):
        K = self.grid.node_count
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, K)
        self.params = np.asarray(self.params, dtype=float).ravel()
        if self.states.shape[1] != K:
            raise ValueError("state array does not match the grid")

    @property
    def times(self) -> np.ndarray:
        return self.time_map.to_time(self.grid.nodes)

    def sample(self, times, which: str = "states") -> np.ndarray:
        values = getattr(self, which)
        return interpolate(self.grid, values, self.time_map.to_reference(np.clip(times, self.time_map.t0, self.time_map.t1)))

    def control_function(self) -> Callable:
        if self.controls.shape[0] == 0:
            return lambda t: np.zeros((0,) + np.shape(t))
        return lambda t: self.sample(t, "controls")

    def copy(self) -> "Trajectory":
        return Trajectory(self.grid, self.time_map, self.states.copy(), self.controls.copy(), self.params.copy())


@dataclass(frozen=True)
class TrajectoryMetric:
    """Norm of a vector signal along a trajectory.

    ``L2`` integrates the weighted squared channels (divided by the horizon length when
    ``time_normalized``), ``Linf`` takes the largest weighted absolute nodal value, and the
    endpoint kinds take the Euclidean norm at ``t0`` or ``t1``.
    """

    kind: str = "L2"
    weights: Optional[tuple] = None
    time_normalized: bool = False

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.weights is not None:
            w = tuple(float(v) for v in np.atleast_1d(self.weights))
            if any(not v > 0 for v in w):
                raise ValueError("metric weights must be positive")
            object.__setattr__(self, "weights", w)

    def channel_weights(self, n: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(n)
        w = np.asarray(self.weights)
        return np.broadcast_to(w, (n,)).copy()

    def node_weights(self, grid: CollocationGrid, time_map: TimeMap) -> np.ndarray:
        """Per-node weights ``q`` so that the squared metric is ``sum_k q_k |v_k|^2``."""
        K = grid.node_count
        if self.kind == "L2":
            q = time_map.scale * np.asarray(grid.weights)
            return q / time_map.length if self.time_normalized else q
        q = np.zeros(K)
        if self.kind == "initial_value_norm":
            q[0] = 1.0
        elif self.kind == "final_value_norm":
            q[-1] = 1.0
        else:
            raise ValueError("Linf has no quadratic node weights")
        return q


def metric_value(metric: TrajectoryMetric, values, grid: CollocationGrid, time_map: TimeMap) -> float:
    """Evaluate ``metric`` on nodal ``values`` of shape ``(channels, nodes)``."""
    v = np.atleast_2d(np.asarray(values, dtype=float))
    if v.shape[1] != grid.node_count:
        raise ValueError("values do not match the grid")
    w = metric.channel_weights(v.shape[0])[:, None]
    if metric.kind == "Linf":
        return float(np.max(np.abs(w * v))) if v.size else 0.0
    q = metric.node_weights(grid, time_map)
    return float(np.sqrt(np.sum((w * v) ** 2 * q[None, :])))


@dataclass
class OutputTube:
    """Bound ``||signal - reference||`` by ``epsilon`` on selected channels.

    A vector ``epsilon`` gives one tube per channel; a scalar bounds the joint norm
    (``Linf`` tubes are per channel and per node regardless).
    """

    epsilon: float | Sequence[float]
    metric: TrajectoryMetric = field(default_factory=lambda: TrajectoryMetric("Linf"))
    channels: Optional[Sequence[int]] = None
    signal: str | Callable = "output"

    def __post_init__(self):
        eps = np.atleast_1d(np.asarray(self.epsilon, dtype=float))
        if np.any(~np.isfinite(eps)) or np.any(eps < 0):
            raise ValueError("tube radius must be finite and nonnegative")
        if self.metric.kind in ("initial_value_norm", "final_value_norm") and eps.size > 1:
            raise ValueError("endpoint tubes take a scalar epsilon")


@dataclass
class ConstraintSet:
    """Everything known about admissible trajectories besides the dynamics.

    ``initial_state`` is ``"free"``, ``"fixed"`` (pinned to the reference) or an array;
    ``final_state`` is ``None`` or an array. ``param_box`` holds ``(lower, upper)``;
    without it parameters stay at their reference values. ``free_controls`` lists the
    control channels the optimizer may change (``None`` means all). ``variation_bounds``
    maps a control channel to its total-variation limit.
    """

    output_tubes: list = field(default_factory=list)
    initial_state: str | np.ndarray = "free"
    final_state: Optional[np.ndarray] = None
    initial_sphere: Optional[float] = None
    endpoint_ineq: Optional[Callable] = None
    path: Optional[Callable] = None
    state_lower: Optional[np.ndarray] = None
    state_upper: Optional[np.ndarray] = None
    control_lower: Optional[np.ndarray] = None
    control_upper: Optional[np.ndarray] = None
    param_box: Optional[tuple] = None
    param_ineq: Optional[Callable] = None
    free_controls: Optional[Sequence[int]] = None
    variation_bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        for tube in self.output_tubes:
            if not isinstance(tube, OutputTube):
                raise TypeError("output_tubes must hold OutputTube instances")
        for ch, vmax in self.variation_bounds.items():
            if not np.isfinite(vmax) or vmax < 0:
                raise ValueError(f"variation bound for control {ch} must be finite and >= 0")
        if self.initial_sphere is not None and not self.initial_sphere > 0:
            raise ValueError("initial sphere radius must be positive")


@dataclass
class Objective:
    """Squared metric of ``signal - reference`` (or the metric itself for ``Linf``).

    ``reference`` is ``"nominal"`` (the reference trajectory's signal), ``"zero"``, or an
    array: one value per channel, or ``(channels, nodes)`` values.
    """

    metric: TrajectoryMetric
    sense: str = "maximize"
    signal: str | Callable = "estimand"
    channels: Optional[Sequence[int]] = None
    reference: str | np.ndarray = "nominal"

    def __post_init__(self):
        if self.sense not in ("minimize", "maximize"):
            raise ValueError("objective sense must be minimize or maximize")
        if self.metric.kind == "Linf" and self.sense == "maximize":
            raise ValueError("Linf objectives are supported for minimization only (epigraph encoding)")


def encode_variation_constraint(node_values, v_max: float, slack=None):
    """Total-variation rows for one control channel.

    With slacks ``s_k`` for ``k = 1..K-1`` the rows are ``du_k - s_k``, ``-du_k - s_k``
    and ``sum(s) - v_max``, all ``<= 0`` (plus ``s >= 0``). When ``slack`` is omitted the
    tightest feasible slack ``|du_k|`` is used, which makes the final row the plain
    variation excess.
    """
    if not np.isfinite(v_max) or v_max < 0:
        raise ValueError("v_max must be finite and nonnegative")
    u = np.asarray(node_values, dtype=float).ravel()
    du = np.diff(u)
    s = np.abs(du) if slack is None else np.asarray(slack, dtype=float)
    return np.concatenate([du - s, -du - s, [s.sum() - v_max]])


def total_variation(values) -> float:
    return float(np.sum(np.abs(np.diff(np.asarray(values, dtype=float)))))


def _extrapolation_weights(grid: CollocationGrid) -> np.ndarray:
    """Weights ``e`` with ``p(-1) = e @ p(x_1..x_N)`` for polynomials of degree ``N - 1``."""
    x = grid.nodes[1:]
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    bw = 1.0 / np.prod(diff, axis=1)
    k = bw / (-1.0 - x)
    return k / k.sum()


def _pow2_scale(values, axis=None):
    m = np.max(np.abs(values), axis=axis) if np.size(values) else 1.0
    m = np.maximum(1.0, m)
    return 2.0 ** np.ceil(np.log2(m))


# --- reference integration -------------------------------------------------------------


def simulate(
    model: DynamicsModel,
    x0,
    time_map: TimeMap,
    grid: CollocationGrid,
    control=None,
    params=None,
    rtol: float = 1e-12,
    atol: float = 1e-13,
    method: str = "DOP853",
) -> Trajectory:
    """Propagate ``model`` with an adaptive integrator and sample at the grid nodes.

    ``control`` is ``None`` (zero input), a callable ``u(t)`` returning ``(n_u,)`` or
    ``(n_u, K)`` values, or a ``(n_u, node_count)`` array of nodal values (interpolated).
    """
    params = model.params if params is None else np.asarray(params, dtype=float)
    nu = model.control_dim
    ufun = _control_callable(control, nu, grid, time_map)
    times = time_map.to_time(grid.nodes)

    def fun(t, x):
        u = np.asarray(ufun(np.array([t])), dtype=float).reshape(nu, 1)
        return model.f(np.array([t]), x[:, None], u, params)[:, 0]

    sol = solve_ivp(fun, (time_map.t0, time_map.t1), np.asarray(x0, dtype=float), method=method,
                    t_eval=times, rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"reference integration failed: {sol.message}")
    states = sol.y
    states[:, 0] = np.asarray(x0, dtype=float)
    controls = np.asarray(ufun(times), dtype=float).reshape(nu, grid.node_count)
    return Trajectory(grid, time_map, states, controls, params)


def collocate(
    model: DynamicsModel,
    x0,
    time_map: TimeMap,
    grid: CollocationGrid,
    control=None,
    params=None,
    tol: float = 1e-12,
    max_iter: int = 30,
) -> Trajectory:
    """Nominal trajectory that satisfies the collocation equations exactly.

    Starts from :func:`simulate` and runs Newton's method on the defects at nodes
    ``1..N`` with the initial state, controls and parameters held fixed. On fine grids
    the correction is at the level of the integrator tolerance; on coarse grids it
    removes the discretization mismatch that would otherwise dominate small tubes.
    """
    traj = simulate(model, x0, time_map, grid, control, params)
    X, U, p = traj.states.copy(), traj.controls, traj.params
    n, K = X.shape
    D = grid.diff_matrix
    s = time_map.scale
    t = time_map.to_time(grid.nodes)
    for _ in range(max_iter):
        f, fx, _, _ = _node_jacobians(model.f, t, X, U, p, n)
        R = (X @ D.T - s * f)[:, 1:]
        scale = max(1.0, float(np.max(np.abs(X))))
        if float(np.max(np.abs(R))) <= tol * scale:
            break
        # residual column k depends on X[:, j] through D[k, j] and on X[:, k] through f
        J = np.kron(D[1:, 1:], np.eye(n))
        for k in range(1, K):
            r = slice((k - 1) * n, k * n)
            J[r, r] -= s * fx[:, :, k]
        step = np.linalg.solve(J, R.T.ravel())
        X[:, 1:] -= step.reshape(K - 1, n).T
        if not np.all(np.isfinite(X)):
            raise FloatingPointError("collocation Newton iteration diverged")
    return Trajectory(grid, time_map, X, U, p)


def _control_callable(control, nu, grid, time_map):
    if control is None:
        return lambda t: np.zeros((nu, np.size(t)))
    if callable(control):
        return lambda t: np.asarray(control(np.asarray(t, dtype=float)), dtype=float).reshape(nu, -1)
    values = np.asarray(control, dtype=float).reshape(nu, grid.node_count)
    return lambda t: interpolate(grid, values, time_map.to_reference(np.clip(np.atleast_1d(t), time_map.t0, time_map.t1))).reshape(nu, -1)


def resimulation_residual(model: DynamicsModel, traj: Trajectory) -> float:
    """Relative mismatch between nodal states and an independent integration.

    The trajectory's own initial state, parameters and interpolated controls are fed to
    the adaptive integrator; the result is ``max|x_sim - x| / max(1, max|x|)``.
    """
    sim = simulate(model, traj.states[:, 0], traj.time_map, traj.grid, control=traj.controls if model.control_dim else None,
                   params=traj.params)
    return float(np.max(np.abs(sim.states - traj.states)) / max(1.0, float(np.max(np.abs(traj.states)))))


# --- node-wise derivatives -------------------------------------------------------------


def _node_jacobians(fun, t, X, U, p, n_out):
    """Per-node Jacobians of a vectorized signal by central differences.

    Returns ``(value (n_out, K), dX (n_out, n_x, K), dU (n_out, n_u, K), dP (n_out, n_p, K))``.
    """
    n_x, K = X.shape
    n_u = U.shape[0]
    n_p = p.size
    val = np.asarray(fun(t, X, U, p), dtype=float).reshape(n_out, K)
    dX = np.empty((n_out, n_x, K))
    dU = np.empty((n_out, n_u, K))
    dP = np.empty((n_out, n_p, K))
    for i in range(n_x):
        h = np.maximum(1e-6, 1e-7 * np.abs(X[i]))
        Xp = X.copy()
        Xm = X.copy()
        Xp[i] += h
        Xm[i] -= h
        dX[:, i, :] = (np.asarray(fun(t, Xp, U, p)).reshape(n_out, K) - np.asarray(fun(t, Xm, U, p)).reshape(n_out, K)) / (2 * h)
    for i in range(n_u):
        h = np.maximum(1e-6, 1e-7 * np.abs(U[i]))
        Up = U.copy()
        Um = U.copy()
        Up[i] += h
        Um[i] -= h
        dU[:, i, :] = (np.asarray(fun(t, X, Up, p)).reshape(n_out, K) - np.asarray(fun(t, X, Um, p)).reshape(n_out, K)) / (2 * h)
    for i in range(n_p):
        h = max(1e-6, 1e-7 * abs(p[i]))
        pp = p.copy()
        pm = p.copy()
        pp[i] += h
        pm[i] -= h
        dP[:, i, :] = (np.asarray(fun(t, X, U, pp)).reshape(n_out, K) - np.asarray(fun(t, X, U, pm)).reshape(n_out, K)) / (2 * h)
    return val, dX, dU, dP


class _Layout:
    """Index bookkeeping between the full (x, u, p) vector and the decision vector."""

    def __init__(self, n_x, n_u, n_p, K):
        self.n_x, self.n_u, self.n_p, self.K = n_x, n_u, n_p, K
        self.x0 = 0
        self.u0 = n_x * K
        self.p0 = self.u0 + n_u * K
        self.size = self.p0 + n_p

    def x(self, i, k):
        return self.x0 + i * self.K + k

    def u(self, i, k):
        return self.u0 + i * self.K + k

    def p(self, i):
        return self.p0 + i


class Transcription:
    """Finite-dimensional image of a dynamic optimization problem.

    Parameters
    ----------
    model : DynamicsModel
    reference : Trajectory
        Nominal trajectory on the same grid; supplies tube references, fixed values
        (initial state, known controls, fixed parameters) and variable scales.
    objective : Objective
    constraints : ConstraintSet
    objective_scale : float
        Positive factor applied to the NLP objective (not to reported metric values).
    deviation_scale : float, optional
        When given, decision variables are deviations from the reference in units of
        ``deviation_scale`` times the channel scale, which keeps small perturbations well
        conditioned.
    deviation_bound : float, optional
        With ``deviation_scale``, additionally box every free core variable to
        ``[-deviation_bound, deviation_bound]``.
    """

    def __init__(self, model: DynamicsModel, reference: Trajectory, objective: Objective,
                 constraints: ConstraintSet | None = None, objective_scale: float = 1.0,
                 deviation_scale: float | None = None, deviation_bound: float | None = None):
        self.model = model
        self.reference = reference
        self.objective = objective
        self.constraints = constraints or ConstraintSet()
        self.grid = reference.grid
        self.time_map = reference.time_map
        self.objective_scale = float(objective_scale)
        if not self.objective_scale > 0:
            raise ValueError("objective_scale must be positive")
        K = self.grid.node_count
        n_x, n_u, n_p = model.state_dim, model.control_dim, model.param_dim
        if reference.states.shape != (n_x, K) or reference.controls.shape != (n_u, K) or reference.params.shape != (n_p,):
            raise ValueError("reference trajectory shapes do not match the model and grid")
        self.layout = L = _Layout(n_x, n_u, n_p, K)
        self.times = reference.times
        cs = self.constraints

        base = np.concatenate([reference.states.ravel(), reference.controls.ravel(), reference.params])
        scale = np.concatenate([
            np.repeat(_pow2_scale(reference.states, axis=1), K),
            np.repeat(_pow2_scale(reference.controls, axis=1) if n_u else np.zeros(0), K),
            _pow2_scale(np.abs(reference.params)[:, None], axis=1) if n_p else np.zeros(0),
        ])
        free = np.ones(L.size, dtype=bool)
        lower = np.full(L.size, -np.inf)
        upper = np.full(L.size, np.inf)

        if isinstance(cs.initial_state, str):
            if cs.initial_state == "fixed":
                free[[L.x(i, 0) for i in range(n_x)]] = False
            elif cs.initial_state != "free":
                raise ValueError(f"initial_state must be 'free', 'fixed' or an array, got {cs.initial_state!r}")
        else:
            x0 = np.asarray(cs.initial_state, dtype=float).ravel()
            if x0.shape != (n_x,):
                raise ValueError("initial_state array has the wrong length")
            idx = [L.x(i, 0) for i in range(n_x)]
            base[idx] = x0
            free[idx] = False

        fixed_controls = set(range(n_u)) if cs.free_controls is not None else set()
        if cs.free_controls is not None:
            for c in cs.free_controls:
                if not 0 <= c < n_u:
                    raise ValueError(f"control channel {c} does not exist")
                fixed_controls.discard(c)
        for c in fixed_controls:
            free[[L.u(c, k) for k in range(K)]] = False

        if cs.param_box is None:
            free[L.p0:L.size] = False
        else:
            plo = np.broadcast_to(np.asarray(cs.param_box[0], float), (n_p,))
            phi = np.broadcast_to(np.asarray(cs.param_box[1], float), (n_p,))
            if np.any(plo > phi):
                raise ValueError("parameter box has lower > upper")
            pinned = plo == phi
            lower[L.p0:L.size] = plo
            upper[L.p0:L.size] = phi
            base[L.p0:L.size] = np.where(pinned, plo, base[L.p0:L.size])
            free[L.p0:L.size] = ~pinned

        for arr, target, sl in ((cs.state_lower, lower, "x"), (cs.state_upper, upper, "x"),
                                (cs.control_lower, lower, "u"), (cs.control_upper, upper, "u")):
            if arr is None:
                continue
            n = n_x if sl == "x" else n_u
            start = L.x0 if sl == "x" else L.u0
            vals = np.broadcast_to(np.asarray(arr, float), (n,))
            target[start:start + n * K] = np.repeat(vals, K)

        self.centered = deviation_scale is not None
        if self.centered:
            if not deviation_scale > 0:
                raise ValueError("deviation_scale must be positive")
            scale = scale * 2.0 ** np.round(np.log2(deviation_scale))
        if deviation_bound is not None and not (self.centered and deviation_bound > 0):
            raise ValueError("deviation_bound needs a deviation_scale and must be positive")
        self.deviation_bound = deviation_bound
        self.base = base
        self.offset = np.where(free, base, 0.0) if self.centered else np.zeros_like(base)
        self.scale = scale
        self.free = free
        self.free_idx = np.flatnonzero(free)
        self.full_lower = lower
        self.full_upper = upper

        # auxiliary variables
        self.tv_channels = []
        for ch, vmax in sorted(cs.variation_bounds.items()):
            if not 0 <= ch < n_u:
                raise ValueError(f"variation bound on missing control channel {ch}")
            if ch in fixed_controls:
                continue
            self.tv_channels.append((ch, float(vmax)))
        self.n_core = self.free_idx.size
        self.n_tv = (K - 1) * len(self.tv_channels)
        self.epigraph = objective.metric.kind == "Linf"
        self.dim = self.n_core + self.n_tv + (1 if self.epigraph else 0)
        if self.dim == 0:
            raise ValueError("problem has no free decision variables")

        self._obj_signal = model.signal(objective.signal)
        self._obj_ref = self._signal_reference(self._obj_signal, objective.channels, objective.reference)
        self._tubes = []
        for tube in cs.output_tubes:
            fun = model.signal(tube.signal)
            ref = self._signal_reference(fun, tube.channels, "nominal")
            eps = np.atleast_1d(np.asarray(tube.epsilon, dtype=float))
            nch = ref.shape[0]
            if eps.size not in (1, nch):
                raise ValueError("tube epsilon length does not match its channels")
            self._tubes.append((tube, fun, ref, eps))
        self._extrap = _extrapolation_weights(self.grid)
        self._cache_key = None
        self._cache = None
        self._check_references()

    # --- public helpers -----------------------------------------------------------------

    def _signal_reference(self, fun, channels, mode):
        r = self.reference
        val = np.atleast_2d(np.asarray(fun(self.times, r.states, r.controls, r.params), dtype=float))
        if channels is not None:
            val = val[list(channels)]
        if not isinstance(mode, str):
            ref = np.asarray(mode, dtype=float)
            if ref.ndim == 1:
                ref = ref[:, None]
            try:
                return np.broadcast_to(ref, val.shape).copy()
            except ValueError:
                raise ValueError("objective reference does not match the signal shape") from None
        if mode == "zero":
            return np.zeros_like(val)
        if mode != "nominal":
            raise ValueError(f"unknown reference mode {mode!r}")
        return val

    def _check_references(self):
        nom = self.encode(self.reference)
        if not np.all(np.isfinite(self._full(nom))):
            raise ValueError("reference trajectory is not finite")

    def _full(self, z):
        w = self.base.copy()
        idx = self.free_idx
        w[idx] = self.offset[idx] + self.scale[idx] * z[:self.n_core]
        return w

    def split(self, w):
        L = self.layout
        X = w[:L.u0].reshape(L.n_x, L.K)
        U = w[L.u0:L.p0].reshape(L.n_u, L.K)
        p = w[L.p0:L.size]
        return X, U, p

    def encode(self, traj: Trajectory, aux=None) -> np.ndarray:
        """Decision vector for ``traj``; auxiliary variables take their tightest values."""
        w = np.concatenate([traj.states.ravel(), traj.controls.ravel(), traj.params])
        z = np.zeros(self.dim)
        idx = self.free_idx
        z[:self.n_core] = (w[idx] - self.offset[idx]) / self.scale[idx]
        if aux is not None:
            z[self.n_core:] = aux
        else:
            X, U, p = traj.states, traj.controls, traj.params
            off = self.n_core
            for ch, _ in self.tv_channels:
                z[off:off + self.layout.K - 1] = np.abs(np.diff(U[ch]))
                off += self.layout.K - 1
            if self.epigraph:
                dev = self._obj_dev_values(X, U, p)
                w_ch = self.objective.metric.channel_weights(dev.shape[0])[:, None]
                z[-1] = float(np.max(np.abs(w_ch * dev))) if dev.size else 0.0
        return z

    def decode(self, z) -> Trajectory:
        z = np.asarray(z, dtype=float)
        X, U, p = self.split(self._full(z))
        return Trajectory(self.grid, self.time_map, X.copy(), U.copy(), p.copy())

    def bounds(self):
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        s = self.scale[self.free_idx]
        off = self.offset[self.free_idx]
        lo[:self.n_core] = (self.full_lower[self.free_idx] - off) / s
        hi[:self.n_core] = (self.full_upper[self.free_idx] - off) / s
        if self.deviation_bound is not None:
            B = self.deviation_bound
            lo[:self.n_core] = np.maximum(lo[:self.n_core], -B)
            hi[:self.n_core] = np.minimum(hi[:self.n_core], B)
        lo[self.n_core:self.n_core + self.n_tv] = 0.0
        if self.epigraph:
            lo[-1] = 0.0
        return lo, hi

    def problem(self) -> NlpProblem:
        lo, hi = self.bounds()
        return NlpProblem(
            dim=self.dim,
            objective=self.nlp_objective,
            sense=self.objective.sense,
            eq_constraints=self.eq,
            ineq_constraints=self.ineq,
            lower=lo,
            upper=hi,
            gradient=self.nlp_gradient,
            eq_jacobian=self.eq_jac,
            ineq_jacobian=self.ineq_jac,
        )

    # --- objective ----------------------------------------------------------------------

    def _obj_dev_values(self, X, U, p):
        v = np.atleast_2d(self._obj_signal(self.times, X, U, p))
        if self.objective.channels is not None:
            v = v[list(self.objective.channels)]
        return v - self._obj_ref

    def objective_metric(self, z) -> float:
        """The objective's metric (not squared, not scaled) at ``z``."""
        X, U, p = self.split(self._full(np.asarray(z, dtype=float)))
        return metric_value(self.objective.metric, self._obj_dev_values(X, U, p), self.grid, self.time_map)

    def tube_values(self, z) -> list[float]:
        """Metric of each tube's deviation; compare with the tubes' epsilon."""
        X, U, p = self.split(self._full(np.asarray(z, dtype=float)))
        out = []
        for tube, fun, ref, eps in self._tubes:
            v = np.atleast_2d(fun(self.times, X, U, p))
            if tube.channels is not None:
                v = v[list(tube.channels)]
            dev = v - ref
            if eps.size > 1:
                out.extend(metric_value(tube.metric, dev[i:i + 1], self.grid, self.time_map) for i in range(dev.shape[0]))
            else:
                out.append(metric_value(tube.metric, dev, self.grid, self.time_map))
        return out

    # --- evaluation -----------------------------------------------------------------------

    def _evaluate(self, z):
        z = np.asarray(z, dtype=float)
        key = z.tobytes()
        if key == self._cache_key:
            return self._cache
        out = self._assemble(z)
        self._cache_key, self._cache = key, out
        return out

    def nlp_objective(self, z):
        return self._evaluate(z)["f"]

    def nlp_gradient(self, z):
        return self._evaluate(z)["df"]

    def eq(self, z):
        return self._evaluate(z)["c"]

    def eq_jac(self, z):
        return self._evaluate(z)["jc"]

    def ineq(self, z):
        return self._evaluate(z)["g"]

    def ineq_jac(self, z):
        return self._evaluate(z)["jg"]

    def _reduce(self, J_full):
        """Map Jacobian columns from the full vector to the decision vector."""
        J = np.zeros((J_full.shape[0], self.dim))
        J[:, :self.n_core] = J_full[:, self.free_idx] * self.scale[self.free_idx]
        return J

    def _signal_rows(self, dX, dU, dP, k_idx, ch_idx):
        """Full-vector Jacobian rows of signal channel ``ch_idx[r]`` at node ``k_idx[r]``."""
        L = self.layout
        n = len(k_idx)
        J = np.zeros((n, L.size))
        K = L.K
        for r, (c, k) in enumerate(zip(ch_idx, k_idx)):
            J[r, L.x0 + np.arange(L.n_x) * K + k] = dX[c, :, k]
            if L.n_u:
                J[r, L.u0 + np.arange(L.n_u) * K + k] = dU[c, :, k]
            if L.n_p:
                J[r, L.p0:L.size] = dP[c, :, k]
        return J

    def _quadratic_rows(self, dev, dX, dU, dP, q, w_ch, groups):
        """Values and full Jacobians of ``sum_{c in group} sum_k q_k w_c^2 dev_ck^2``."""
        L = self.layout
        vals = []
        rows = []
        for group in groups:
            val = 0.0
            J = np.zeros(L.size)
            for c in group:
                coef = 2.0 * q * w_ch[c] ** 2 * dev[c]
                val += float(np.sum(q * (w_ch[c] * dev[c]) ** 2))
                J[L.x0:L.u0] += (dX[c] * coef[None, :]).ravel()
                if L.n_u:
                    J[L.u0:L.p0] += (dU[c] * coef[None, :]).ravel()
                if L.n_p:
                    J[L.p0:L.size] += dP[c] @ coef
            vals.append(val)
            rows.append(J)
        return np.array(vals), np.array(rows).reshape(len(groups), L.size)

    def _assemble(self, z):
        L = self.layout
        K = L.K
        cs = self.constraints
        model = self.model
        w = self._full(z)
        X, U, p = self.split(w)
        t = self.times
        s = self.time_map.scale
        D = self.grid.diff_matrix

        # dynamics defects at nodes 1..K-1, scaled by the state scales
        fval, fX, fU, fP = _node_jacobians(model.f, t, X, U, p, L.n_x)
        sx = self.scale[L.x0:L.u0].reshape(L.n_x, K)[:, 0]
        defect = (X @ D.T - s * fval)[:, 1:] / sx[:, None]
        n_def = L.n_x * (K - 1)
        Jd = np.zeros((n_def, L.size))
        rows = np.arange(K - 1)
        for i in range(L.n_x):
            r0 = i * (K - 1)
            Jd[r0:r0 + K - 1, L.x0 + i * K:L.x0 + (i + 1) * K] += D[1:, :]
            for j in range(L.n_x):
                Jd[r0 + rows, L.x0 + j * K + rows + 1] -= s * fX[i, j, 1:]
            for j in range(L.n_u):
                Jd[r0 + rows, L.u0 + j * K + rows + 1] -= s * fU[i, j, 1:]
            for j in range(L.n_p):
                Jd[r0:r0 + K - 1, L.p0 + j] -= s * fP[i, j, 1:]
            Jd[r0:r0 + K - 1] /= sx[i]
        eq_vals = [defect.ravel()]
        eq_jacs = [self._reduce(Jd)]

        if cs.final_state is not None:
            x1 = np.asarray(cs.final_state, dtype=float).ravel()
            idx = [L.x(i, K - 1) for i in range(L.n_x)]
            eq_vals.append((X[:, -1] - x1) / sx)
            Jf = np.zeros((L.n_x, L.size))
            Jf[np.arange(L.n_x), idx] = 1.0 / sx
            eq_jacs.append(self._reduce(Jf))

        free_u = [c for c in range(L.n_u) if self.free[L.u(c, 0)]]
        if free_u:
            ew = self._extrap
            su = self.scale[[L.u(c, 0) for c in free_u]]
            eq_vals.append((U[free_u, 0] - U[free_u, 1:] @ ew) / su)
            Je = np.zeros((len(free_u), L.size))
            for r, c in enumerate(free_u):
                Je[r, L.u(c, 0)] = 1.0 / su[r]
                Je[r, L.u(c, 1):L.u(c, 0) + K] = -ew / su[r]
            eq_jacs.append(self._reduce(Je))

        if cs.initial_sphere is not None:
            rho = float(cs.initial_sphere)
            d0 = X[:, 0] - self.reference.states[:, 0]
            eq_vals.append(np.array([(d0 @ d0) / rho**2 - 1.0]))
            Js = np.zeros((1, L.size))
            Js[0, [L.x(i, 0) for i in range(L.n_x)]] = 2.0 * d0 / rho**2
            eq_jacs.append(self._reduce(Js))

        ineq_vals = []
        ineq_jacs = []

        for tube, fun, ref, eps in self._tubes:
            n_sig = np.atleast_2d(fun(t[:1], X[:, :1], U[:, :1], p)).shape[0]
            val, dX, dU, dP = _node_jacobians(fun, t, X, U, p, n_sig)
            if tube.channels is not None:
                ch = list(tube.channels)
                val, dX, dU, dP = val[ch], dX[ch], dU[ch], dP[ch]
            dev = val - ref
            nch = dev.shape[0]
            w_ch = tube.metric.channel_weights(nch)
            e = np.broadcast_to(eps, (nch,))
            if tube.metric.kind == "Linf":
                cc, kk = np.meshgrid(np.arange(nch), np.arange(K), indexing="ij")
                cc, kk = cc.ravel(), kk.ravel()
                Jrow = self._signal_rows(dX, dU, dP, kk, cc)
                # zero-radius tubes become two-sided bounds on the raw deviation
                denom = np.where(e[cc] > 0, e[cc], 1.0)
                one = np.where(e[cc] > 0, 1.0, 0.0)
                coef = (w_ch[cc] / denom)[:, None]
                scaled = w_ch[cc] * dev[cc, kk] / denom
                ineq_vals.append(np.concatenate([scaled - one, -scaled - one]))
                Jr = self._reduce(Jrow * coef)
                ineq_jacs.append(np.vstack([Jr, -Jr]))
            else:
                q = tube.metric.node_weights(self.grid, self.time_map)
                groups = [[c] for c in range(nch)] if eps.size > 1 else [list(range(nch))]
                vals, Jq = self._quadratic_rows(dev, dX, dU, dP, q, w_ch, groups)
                e2 = np.array([e[g[0]] ** 2 for g in groups]) if eps.size > 1 else np.array([e[0] ** 2])
                pos = e2 > 0
                denom = np.where(pos, e2, 1.0)
                ineq_vals.append(np.where(pos, vals / denom - 1.0, vals))
                ineq_jacs.append(self._reduce(Jq / denom[:, None]))

        if cs.path is not None:
            sval, sX, sU, sP = _node_jacobians(cs.path, t, X, U, p, np.atleast_2d(cs.path(t[:1], X[:, :1], U[:, :1], p)).shape[0])
            nps = sval.shape[0]
            cc, kk = np.meshgrid(np.arange(nps), np.arange(K), indexing="ij")
            ineq_vals.append(sval.ravel())
            ineq_jacs.append(self._reduce(self._signal_rows(sX, sU, sP, kk.ravel(), cc.ravel())))

        if cs.endpoint_ineq is not None:
            def E(v):
                return np.atleast_1d(cs.endpoint_ineq(v[:L.n_x], v[L.n_x:]))
            v0 = np.concatenate([X[:, 0], X[:, -1]])
            ev = E(v0)
            JE = fd_jacobian(E, v0)
            Jfull = np.zeros((ev.size, L.size))
            Jfull[:, [L.x(i, 0) for i in range(L.n_x)]] = JE[:, :L.n_x]
            Jfull[:, [L.x(i, K - 1) for i in range(L.n_x)]] = JE[:, L.n_x:]
            ineq_vals.append(ev)
            ineq_jacs.append(self._reduce(Jfull))

        if cs.param_ineq is not None and L.n_p:
            pv = np.atleast_1d(np.asarray(cs.param_ineq(p), dtype=float))
            JP = fd_jacobian(lambda q: np.atleast_1d(cs.param_ineq(q)), p)
            Jfull = np.zeros((pv.size, L.size))
            Jfull[:, L.p0:L.size] = JP
            ineq_vals.append(pv)
            ineq_jacs.append(self._reduce(Jfull))

        # total variation with slacks
        off = self.n_core
        for ch, vmax in self.tv_channels:
            m = K - 1
            sl = z[off:off + m]
            ineq_vals.append(encode_variation_constraint(U[ch], vmax, sl) / max(1.0, vmax))
            Jfull = np.zeros((2 * m + 1, L.size))
            cols = L.u0 + ch * K + np.arange(K)
            Jfull[np.arange(m), cols[1:]] = 1.0
            Jfull[np.arange(m), cols[:-1]] = -1.0
            Jfull[m + np.arange(m), cols[1:]] = -1.0
            Jfull[m + np.arange(m), cols[:-1]] = 1.0
            J = self._reduce(Jfull)
            J[np.arange(m), off + np.arange(m)] = -1.0
            J[m + np.arange(m), off + np.arange(m)] = -1.0
            J[2 * m, off:off + m] = 1.0
            ineq_jacs.append(J / max(1.0, vmax))
            off += m

        # objective
        obj = self.objective
        n_sig = np.atleast_2d(self._obj_signal(t[:1], X[:, :1], U[:, :1], p)).shape[0]
        oval, oX, oU, oP = _node_jacobians(self._obj_signal, t, X, U, p, n_sig)
        if obj.channels is not None:
            ch = list(obj.channels)
            oval, oX, oU, oP = oval[ch], oX[ch], oU[ch], oP[ch]
        dev = oval - self._obj_ref
        nch = dev.shape[0]
        w_ch = obj.metric.channel_weights(nch)
        if self.epigraph:
            tau = z[-1]
            f = tau
            df = np.zeros(self.dim)
            df[-1] = 1.0
            cc, kk = np.meshgrid(np.arange(nch), np.arange(K), indexing="ij")
            cc, kk = cc.ravel(), kk.ravel()
            Jr = self._reduce(self._signal_rows(oX, oU, oP, kk, cc) * w_ch[cc][:, None])
            v = w_ch[cc] * dev[cc, kk]
            Jp = Jr.copy()
            Jp[:, -1] = -1.0
            Jm = -Jr
            Jm[:, -1] = -1.0
            ineq_vals.append(np.concatenate([v - tau, -v - tau]))
            ineq_jacs.append(np.vstack([Jp, Jm]))
        else:
            q = obj.metric.node_weights(self.grid, self.time_map)
            vals, Jq = self._quadratic_rows(dev, oX, oU, oP, q, w_ch, [list(range(nch))])
            f = float(vals[0])
            df = self._reduce(Jq)[0]
        f *= self.objective_scale
        df = df * self.objective_scale

        c = np.concatenate(eq_vals) if eq_vals else np.zeros(0)
        jc = np.vstack(eq_jacs) if eq_jacs else np.zeros((0, self.dim))
        g = np.concatenate(ineq_vals) if ineq_vals else np.zeros(0)
        jg = np.vstack(ineq_jacs) if ineq_jacs else np.zeros((0, self.dim))
        return {"f": f, "df": df, "c": c, "jc": jc, "g": g, "jg": jg}

    def dependent_indices(self):
        """Decision positions the equalities determine, or ``None`` if there is no such split.

        These are the states at nodes ``1..N`` (fixed by the defects) and ``u(t0)`` of each
        free control (fixed by its extrapolation row). Endpoint or sphere equalities leave
        no square split.
        """
        cs = self.constraints
        if cs.final_state is not None or cs.initial_sphere is not None:
            return None
        L = self.layout
        full = [L.x(i, k) for i in range(L.n_x) for k in range(1, L.K)]
        full += [L.u(c, 0) for c in range(L.n_u) if self.free[L.u(c, 0)]]
        pos = np.searchsorted(self.free_idx, full)
        if np.any(pos >= self.free_idx.size) or np.any(self.free_idx[pos] != full):
            return None
        return pos

    def box_active(self, z, fraction: float = 0.99) -> bool:
        """Whether any core variable sits near the deviation box (always False without one)."""
        if self.deviation_bound is None:
            return False
        return bool(np.max(np.abs(np.asarray(z)[:self.n_core])) >= fraction * self.deviation_bound)

    def defect_residual(self, z) -> float:
        """Largest unscaled collocation defect at ``z``."""
        X, U, p = self.split(self._full(np.asarray(z, dtype=float)))
        d = X @ self.grid.diff_matrix.T - self.time_map.scale * self.model.f(self.times, X, U, p)
        return float(np.max(np.abs(d[:, 1:]))) if d.size else 0.0


def transcribe(model, reference, objective, constraints=None, objective_scale=1.0, deviation_scale=None,
               deviation_bound=None):
    """Build a :class:`Transcription`; returns ``(problem, transcription)``.

    The transcription doubles as encoder/decoder between decision vectors and trajectories.
    """
    tr = Transcription(model, reference, objective, constraints, objective_scale, deviation_scale, deviation_bound)
    return tr.problem(), tr
