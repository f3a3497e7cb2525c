"""Catalog of example systems with their nominal setups.

Each constructor returns a :class:`~ambiguity.transcription.DynamicsModel`; the matching
``*_entry`` helpers bundle the nominal initial state, input and horizon as a
:class:`CatalogEntry`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from typing import Callable, Optional

import numpy as np

from .transcription import DynamicsModel


class SingularityError(FloatingPointError):
    """Raised when the AFM interaction force is evaluated at (or past) contact."""


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    model: DynamicsModel
    x0: np.ndarray
    horizon: tuple
    control: Optional[Callable] = None
    citation: str = ""
    notes: dict = field(default_factory=dict)


@lru_cache(maxsize=8)
def _gauss_legendre(points: int):
    return np.polynomial.legendre.leggauss(points)


@dataclass(frozen=True)
class FourierControlSpace:
    """Two-frequency input space on ``[t0, t_f]``.

    ``w(t) = sum_i A_i cos(2 pi k_i t / T) + B_i sin(2 pi k_i t / T)``. For a zero frequency
    the sine term vanishes identically and is dropped from the basis.
    """

    k1: int
    k2: int
    t0: float = 0.0
    tf: float = 1.0

    def __post_init__(self):
        for k in (self.k1, self.k2):
            if int(k) != k or k < 0:
                raise ValueError("frequencies must be nonnegative integers")
        if self.k1 == self.k2 and not (self.k1 == 0 and self.k2 == 0):
            raise ValueError("k1 and k2 must differ unless both are zero")
        if not self.tf > self.t0:
            raise ValueError("input space needs a positive-length horizon")

    @property
    def terms(self) -> list[tuple[str, int]]:
        out = []
        for k in dict.fromkeys((self.k1, self.k2)):
            out.append(("cos", k))
            if k > 0:
                out.append(("sin", k))
        return out

    @property
    def dim(self) -> int:
        return len(self.terms)

    def basis(self, t) -> np.ndarray:
        """Basis values, shape ``(dim,) + t.shape``."""
        t = np.asarray(t, dtype=float)
        om = 2.0 * np.pi / (self.tf - self.t0)
        rows = []
        for kind, k in self.terms:
            arg = om * k * (t - self.t0)
            rows.append(np.cos(arg) if kind == "cos" else np.sin(arg))
        return np.array(rows)

    def evaluate(self, coefficients, t) -> np.ndarray:
        c = np.asarray(coefficients, dtype=float)
        if c.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} coefficients")
        return np.tensordot(c, self.basis(t), axes=1)

    def gram(self, normalized: bool = True, quad_points: int = 512) -> np.ndarray:
        """Inner products of basis functions, ``1/(t_f - t_0)``-normalized by default.

        Computed with Gauss-Legendre quadrature, exact to rounding for these frequencies.
        """
        x, w = _gauss_legendre(quad_points)
        half = 0.5 * (self.tf - self.t0)
        t = self.t0 + half * (x + 1.0)
        B = self.basis(t)
        G = (B * (w * half)) @ B.T
        return G / (self.tf - self.t0) if normalized else G


# --- chain ------------------------------------------------------------------------------


def chain_matrix(n: int) -> np.ndarray:
    A = np.zeros((n, n))
    A[np.arange(n - 1), np.arange(1, n)] = 1.0
    A[-1] = [-comb(n, i) for i in range(n)]
    return A


def chain_system(n: int) -> DynamicsModel:
    """Companion-form chain with characteristic polynomial ``(s + 1)^n`` and ``y = x1``."""
    if isinstance(n, bool) or int(n) != n or not 2 <= n <= 12:
        raise ValueError(f"chain dimension must be an integer in [2, 12], got {n!r}")
    n = int(n)
    A = chain_matrix(n)
    C = np.zeros((1, n))
    C[0, 0] = 1.0
    return DynamicsModel(
        name=f"chain-{n}",
        state_dim=n,
        control_dim=0,
        param_dim=0,
        rhs=lambda t, x, u, p: A @ x,
        output=lambda t, x, u, p: x[:1],
        output_dim=1,
        state_names=[f"x{i + 1}" for i in range(n)],
        output_names=["y"],
        info={"A": A, "B": np.zeros((n, 0)), "C": C},
    )


def chain_entry(n: int) -> CatalogEntry:
    x0 = np.zeros(n)
    x0[-1] = 1.0
    return CatalogEntry(f"chain-{n}", chain_system(n), x0, (0.0, 15.0), citation="linear chain example")


def lti_model(A, B=None, C=None, name: str = "lti") -> DynamicsModel:
    """Linear time-invariant model ``xdot = A x + B u``, ``y = C x``, estimand ``x``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.zeros((n, 0)) if B is None else np.asarray(B, dtype=float).reshape(n, -1)
    C = np.eye(n) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    m = B.shape[1]
    if m:
        rhs = lambda t, x, u, p: A @ x + B @ u
    else:
        rhs = lambda t, x, u, p: A @ x
    return DynamicsModel(
        name=name,
        state_dim=n,
        control_dim=m,
        param_dim=0,
        rhs=rhs,
        output=lambda t, x, u, p: C @ x,
        output_dim=C.shape[0],
        info={"A": A, "B": B, "C": C},
    )


# --- vehicles ---------------------------------------------------------------------------

VEHICLE_DEFAULTS = {
    "t0": 0.0,
    "tf": 20.0,
    "d1": -2.0,
    "d2": -2.0,
    "a": (-1.0, -2.0),
    "b": (-3.0, -7.0),
    "x1_0": (0.0, 4.0),
    "x2_0": ("d1", 4.0),
    "x3_0": ("d2", 4.0),
}

VEHICLE_STATES = ["x11", "x12", "y11", "y12", "x21", "x22", "y21", "y22", "x31", "x32", "y31", "y32"]


def vehicle_network(d1=-2.0, d2=-2.0, a=(-1.0, -2.0), b=(-3.0, -7.0)) -> DynamicsModel:
    """Three planar point-mass vehicles; vehicle 2 follows 1, vehicle 3 follows their average.

    States are ordered ``(x_i1, x_i2, y_i1, y_i2)`` per vehicle. Controls are vehicle 1's
    accelerations ``(u1, v1)``; the y-axis uses the same feedback gains as the x-axis.
    Output ``(x21, y21, x31, y31)``, estimand ``(x11, y11, x12, y12)``.
    """
    a1, a2 = a
    b1, b2 = b

    def follow(p1, v1, p2, v2, p3, v3):
        f2 = a1 * (p2 - p1 - d1) + a2 * (v2 - v1)
        f3 = b1 * (p3 - 0.5 * (p1 + p2) - d2) + b2 * (v3 - 0.5 * (v1 + v2))
        return f2, f3

    def rhs(t, x, u, p):
        x11, x12, y11, y12, x21, x22, y21, y22, x31, x32, y31, y32 = x
        u2, u3 = follow(x11, x12, x21, x22, x31, x32)
        v2, v3 = follow(y11, y12, y21, y22, y31, y32)
        return np.array([x12, u[0], y12, u[1], x22, u2, y22, v2, x32, u3, y32, v3])

    return DynamicsModel(
        name="vehicles",
        state_dim=12,
        control_dim=2,
        param_dim=0,
        rhs=rhs,
        output=lambda t, x, u, p: x[[4, 6, 8, 10]],
        output_dim=4,
        estimand=lambda t, x, u, p: x[[0, 2, 1, 3]],
        estimand_dim=4,
        state_names=VEHICLE_STATES,
        control_names=["u1", "v1"],
        output_names=["x21", "y21", "x31", "y31"],
        estimand_names=["x11", "y11", "x12", "y12"],
        info={"d1": d1, "d2": d2, "a": a, "b": b},
    )


def vehicle_nominal_input(t0: float = 0.0, tf: float = 20.0, reading: str = "half-sine") -> Callable:
    """Nominal vehicle-1 input ``(u1, v1)``.

    ``"literal"`` is ``u1 = sin((tf - t0) t / pi)``; ``"half-sine"`` is
    ``u1 = sin(pi t / (tf - t0))``, whose total variation on the horizon is 2. ``v1 = 0``.
    """
    if reading == "literal":
        om = (tf - t0) / np.pi
    elif reading == "half-sine":
        om = np.pi / (tf - t0)
    else:
        raise ValueError(f"unknown nominal-input reading {reading!r}")
    return lambda t: np.array([np.sin(om * np.asarray(t, float)), np.zeros_like(np.asarray(t, float))])


def nominal_input_variation(reading: str, t0: float = 0.0, tf: float = 20.0, samples: int = 200001) -> float:
    """Total variation of the nominal u1 on the horizon (dense sampling)."""
    t = np.linspace(t0, tf, samples)
    u = vehicle_nominal_input(t0, tf, reading)(t)[0]
    return float(np.sum(np.abs(np.diff(u))))


def vehicle_entry(reading: str = "half-sine", **params) -> CatalogEntry:
    d1 = params.get("d1", -2.0)
    d2 = params.get("d2", -2.0)
    model = vehicle_network(d1, d2, params.get("a", (-1.0, -2.0)), params.get("b", (-3.0, -7.0)))
    # x-axis initials from the parameter table; y-axis vehicles start at rest at zero offset
    x0 = np.array([0.0, 4.0, 0.0, 0.0, d1, 4.0, 0.0, 0.0, d2, 4.0, 0.0, 0.0])
    t0, tf = 0.0, 20.0
    notes = {
        "nominal_input_reading": reading,
        "tv_literal": nominal_input_variation("literal", t0, tf),
        "tv_half_sine": nominal_input_variation("half-sine", t0, tf),
        "v_max": 3.0,
    }
    return CatalogEntry("vehicles", model, x0, (t0, tf), vehicle_nominal_input(t0, tf, reading),
                        citation="cooperative vehicle network", notes=notes)


# --- Laub-Loomis ----------------------------------------------------------------------

LAUB_LOOMIS_K = np.array([2.0, 0.9, 2.5, 1.5, 0.6, 0.8, 1.0, 1.3, 0.3, 0.8, 0.7, 4.9, 23.0, 4.5])
LAUB_LOOMIS_X0 = np.array([1.9675, 1.2822, 0.6594, 1.1967, 0.6712, 0.2711, 1.3428])
LAUB_LOOMIS_UNKNOWN = (0, 5, 9)  # k1, k6, k10


def laub_loomis(k=None, unknown=LAUB_LOOMIS_UNKNOWN) -> DynamicsModel:
    """Seven-state polynomial oscillator; parameters are the 14 rate constants.

    Output ``y = x1``; the estimand is the subvector of ``k`` listed in ``unknown``.
    """
    k = LAUB_LOOMIS_K if k is None else np.asarray(k, dtype=float)
    if k.shape != (14,):
        raise ValueError("Laub-Loomis needs 14 rate constants")
    unknown = tuple(int(i) for i in unknown)

    def rhs(t, x, u, p):
        x1, x2, x3, x4, x5, x6, x7 = x
        return np.array([
            p[0] * x7 - p[1] * x1 * x2,
            p[2] * x5 - p[3] * x2,
            p[4] * x7 - p[5] * x2 * x3,
            p[6] - p[7] * x3 * x4,
            p[8] * x1 - p[9] * x4 * x5,
            p[10] * x1 - p[11] * x6,
            p[12] * x6 - p[13] * x7,
        ])

    return DynamicsModel(
        name="laub-loomis",
        state_dim=7,
        control_dim=0,
        param_dim=14,
        rhs=rhs,
        output=lambda t, x, u, p: x[:1],
        output_dim=1,
        estimand=lambda t, x, u, p: np.repeat(np.asarray(p)[list(unknown), None], np.size(t), axis=1),
        estimand_dim=len(unknown),
        params=k,
        state_names=[f"x{i + 1}" for i in range(7)],
        param_names=[f"k{i + 1}" for i in range(14)],
        output_names=["x1"],
        estimand_names=[f"k{i + 1}" for i in unknown],
        info={"unknown": unknown},
    )


def laub_loomis_entry(k=None, x0=None, horizon=(0.0, 8.0)) -> CatalogEntry:
    x0 = LAUB_LOOMIS_X0 if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (7,):
        raise ValueError("Laub-Loomis needs a 7-vector initial state")
    return CatalogEntry("laub-loomis", laub_loomis(k), x0.copy(), tuple(horizon),
                        citation="Laub-Loomis biochemical oscillator",
                        notes={"reported_worst": {"k1": 2.0150, "k6": 0.8082, "k10": 0.7836}})


# --- AFM ---------------------------------------------------------------------------------

AFM_DEFAULTS = {"omega": 1.0, "xi": 0.02, "alpha1": 0.1481, "alpha2": 3.6e-6}


def afm_force(x1, delta, alpha1=0.1481, alpha2=3.6e-6):
    """Tip-sample interaction ``-alpha1/(delta + x1)^2 + alpha2/(delta + x1)^8``."""
    gap = np.asarray(delta, dtype=float) + np.asarray(x1, dtype=float)
    if np.any(gap <= 1e-6) or not np.all(np.isfinite(gap)):
        raise SingularityError("tip-sample gap delta + x1 must stay above 1e-6")
    return -alpha1 / gap**2 + alpha2 / gap**8


def afm(omega=1.0, xi=0.02, alpha1=0.1481, alpha2=3.6e-6, delta=1.0) -> DynamicsModel:
    """Cantilever tip model with controls ``(u, w)`` and parameter ``delta``.

    ``x1' = x2``, ``x2' = -omega^2 x1 - 2 xi omega x2 + h(x1, delta) + u + w``; ``z = x1``.
    """

    def rhs(t, x, u, p):
        h = afm_force(x[0], p[0], alpha1, alpha2)
        return np.array([x[1], -omega**2 * x[0] - 2.0 * xi * omega * x[1] + h + u[0] + u[1]])

    return DynamicsModel(
        name="afm",
        state_dim=2,
        control_dim=2,
        param_dim=1,
        rhs=rhs,
        output=lambda t, x, u, p: x[:1],
        output_dim=1,
        estimand=lambda t, x, u, p: x[:1],
        estimand_dim=1,
        params=np.array([float(delta)]),
        state_names=["x1", "x2"],
        control_names=["u", "w"],
        param_names=["delta"],
        estimand_names=["x1"],
        info={"omega": omega, "xi": xi, "alpha1": alpha1, "alpha2": alpha2},
    )


def afm_entry(delta=1.0, **params) -> CatalogEntry:
    m = afm(delta=delta, **params)
    return CatalogEntry("afm", m, np.zeros(2), (0.0, 7.0),
                        control=lambda t: np.array([np.ones_like(np.asarray(t, float)), np.zeros_like(np.asarray(t, float))]),
                        citation="atomic force microscope cantilever",
                        notes={"delta_box": (0.8, 1.2), "sigma": 0.03})


# --- heat rod -----------------------------------------------------------------------------


def heat_rod(N: int = 31, kappa: float = 0.14) -> DynamicsModel:
    """Central-difference heat rod with Dirichlet left end and boundary-rate control ``v``.

    ``x_i = w(r_i)`` for ``r_i = i dr``, ``dr = 2 pi / N``. The last state obeys
    ``x_N' = v``; the Neumann input is recovered as ``u = (v - x_{N-1}') / dr``.
    """
    if isinstance(N, bool) or int(N) != N or N < 3:
        raise ValueError("heat rod needs N >= 3 spatial nodes")
    N = int(N)
    dr = 2.0 * np.pi / N
    c = kappa / dr**2
    L = np.zeros((N, N))
    for i in range(N - 1):
        L[i, i] = -2.0 * c
        if i > 0:
            L[i, i - 1] = c
        L[i, i + 1] = c
    B = np.zeros((N, 1))
    B[-1, 0] = 1.0

    return DynamicsModel(
        name="heat-rod",
        state_dim=N,
        control_dim=1,
        param_dim=0,
        rhs=lambda t, x, u, p: L @ x + B @ u,
        state_names=[f"x{i + 1}" for i in range(N)],
        control_names=["v"],
        info={"A": L, "B": B, "dr": dr, "kappa": kappa, "r": dr * np.arange(1, N + 1)},
    )


def heat_target(A: float, N: int = 31) -> np.ndarray:
    """Arch ``A sin(r/2)`` sampled at ``r_i = i 2 pi / N``, ``i = 1..N``."""
    r = 2.0 * np.pi / N * np.arange(1, N + 1)
    return A * np.sin(r / 2.0)


def heat_neumann_input(model: DynamicsModel, x, v) -> np.ndarray:
    """Recover the boundary input ``u = (v - x_{N-1}') / dr`` from states and ``v``."""
    A = model.info["A"]
    xdot = A @ np.asarray(x, dtype=float)
    return (np.asarray(v, dtype=float).reshape(-1) - xdot[-2]) / model.info["dr"]


def heat_rod_entry(N: int = 31, kappa: float = 0.14, tf: float = 150.0) -> CatalogEntry:
    return CatalogEntry("heat-rod", heat_rod(N, kappa), np.zeros(N), (0.0, tf),
                        control=lambda t: np.zeros((1, np.size(t))),
                        citation="heat equation with Neumann boundary control",
                        notes={"state_cap": 2.0, "amplitudes": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2]})


CATALOG = {
    "chain": chain_entry,
    "vehicles": vehicle_entry,
    "laub-loomis": laub_loomis_entry,
    "afm": afm_entry,
    "heat-rod": heat_rod_entry,
}


def catalog_entry(name: str, **params) -> CatalogEntry:
    try:
        factory = CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; available: {', '.join(CATALOG)}") from None
    if name == "chain":
        return factory(int(params.get("n", 2)))
    return factory(**params)
