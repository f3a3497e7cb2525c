"""Closed-form gramian quantities for linear time-invariant systems.

These are independent of the optimizer and serve as reference values for the measures.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

SINGULAR_RTOL = 1e-14


@dataclass(frozen=True)
class LtiSystem:
    """``xdot = A x + B u``, ``y = C x`` on the horizon ``(t0, t1)``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    horizon: tuple = (0.0, 1.0)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("A must be square")
        B = np.asarray(self.B, dtype=float).reshape(n, -1)
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape[1] != n:
            raise ValueError("C must have as many columns as A")
        t0, t1 = (float(v) for v in self.horizon)
        if not (np.isfinite(t0) and np.isfinite(t1)) or not t1 > t0:
            raise ValueError("horizon must be finite with positive length")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "horizon", (t0, t1))

    @property
    def n(self) -> int:
        return self.A.shape[0]


def _gauss_panels(length: float, panels: int, order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    h = length / panels
    left = h * np.arange(panels)
    tau = (left[:, None] + 0.5 * h * (x[None, :] + 1.0)).ravel()
    wt = np.tile(0.5 * h * w, panels)
    return tau, wt


def _gramian(A, M, length, panels, order, transpose_left):
    tau, wt = _gauss_panels(length, panels, order)
    n = A.shape[0]
    P = np.zeros((n, n))
    for t, w in zip(tau, wt):
        E = expm(A * t)
        F = M @ E if transpose_left else E @ M
        P += w * (F.T @ F if transpose_left else F @ F.T)
    return 0.5 * (P + P.T)


def observability_gramian(sys: LtiSystem, panels: int = 64, order: int = 8) -> np.ndarray:
    """``int_0^T e^{A^T t} C^T C e^{A t} dt`` by composite Gauss quadrature."""
    T = sys.horizon[1] - sys.horizon[0]
    return _gramian(sys.A, sys.C, T, panels, order, transpose_left=True)


def controllability_gramian(sys: LtiSystem, panels: int = 64, order: int = 8) -> np.ndarray:
    """``int_0^T e^{A t} B B^T e^{A^T t} dt`` by composite Gauss quadrature."""
    T = sys.horizon[1] - sys.horizon[0]
    if sys.B.shape[1] == 0:
        return np.zeros((sys.n, sys.n))
    return _gramian(sys.A, sys.B, T, panels, order, transpose_left=False)


def _is_singular(lam: np.ndarray) -> bool:
    top = float(np.max(np.abs(lam))) if lam.size else 0.0
    return top == 0.0 or float(np.min(lam)) <= SINGULAR_RTOL * top


def ambiguity_from_gramian(P, epsilon: float) -> float:
    """``epsilon / sqrt(lambda_min(P))``; ``inf`` when ``P`` is numerically singular."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    lam = np.linalg.eigvalsh(np.atleast_2d(np.asarray(P, dtype=float)))
    if _is_singular(lam):
        return float("inf")
    return float(epsilon / np.sqrt(lam[0]))


def weakest_direction(P) -> tuple[float, np.ndarray]:
    """Smallest eigenvalue of ``P`` and a unit eigenvector for it."""
    lam, V = np.linalg.eigh(np.atleast_2d(np.asarray(P, dtype=float)))
    return float(lam[0]), V[:, 0]


def min_energy_cost(P_ctrl, x1) -> float:
    """``sqrt(x1^T P^{-1} x1)``, the least L2 control effort reaching ``x1`` from the origin.

    Returns ``inf`` when ``P_ctrl`` is numerically singular.
    """
    P = np.atleast_2d(np.asarray(P_ctrl, dtype=float))
    x1 = np.asarray(x1, dtype=float).ravel()
    if not np.any(x1):
        return 0.0
    lam, V = np.linalg.eigh(P)
    if _is_singular(lam):
        return float("inf")
    c = V.T @ x1
    return float(np.sqrt(np.sum(c**2 / lam)))


def worst_energy_on_ball(P_ctrl, epsilon: float) -> float:
    """Largest minimum-energy cost over targets with ``|x1| = epsilon``: ``epsilon / sqrt(sigma_min)``."""
    return ambiguity_from_gramian(P_ctrl, epsilon)
