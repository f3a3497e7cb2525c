"""Legendre-Gauss-Lobatto grids, quadrature, differentiation and interpolation."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class CollocationGrid:
    """LGL nodes on [-1, 1] with quadrature weights and differentiation matrix.

    Arrays are read-only; grids are cached per node count and shared.
    """

    node_count: int
    nodes: np.ndarray
    weights: np.ndarray
    diff_matrix: np.ndarray
    bary_weights: np.ndarray

    @property
    def degree(self) -> int:
        return self.node_count - 1


@dataclass(frozen=True)
class TimeMap:
    """Affine map between the reference interval [-1, 1] and [t0, t1]."""

    t0: float
    t1: float

    def __post_init__(self):
        if not (np.isfinite(self.t0) and np.isfinite(self.t1)):
            raise ValueError("time map endpoints must be finite")
        if not self.t1 > self.t0:
            raise ValueError(f"degenerate horizon: t1={self.t1} must exceed t0={self.t0}")

    @property
    def scale(self) -> float:
        return 0.5 * (self.t1 - self.t0)

    @property
    def length(self) -> float:
        return self.t1 - self.t0

    def to_time(self, tau):
        return self.t0 + self.scale * (np.asarray(tau, dtype=float) + 1.0)

    def to_reference(self, t):
        return (np.asarray(t, dtype=float) - self.t0) / self.scale - 1.0


def _legendre(N: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (P_N(x), P_{N-1}(x)) by the three-term recurrence."""
    p_prev = np.ones_like(x)
    p = x.copy()
    if N == 0:
        return p_prev, np.zeros_like(x)
    for k in range(2, N + 1):
        p_prev, p = p, ((2 * k - 1) * x * p - (k - 1) * p_prev) / k
    return p, p_prev


def _lgl_nodes(N: int) -> np.ndarray:
    # Newton on x P_N - P_{N-1}, which is (1 - x^2) P_N' / N; its derivative is (N + 1) P_N.
    x = -np.cos(np.pi * np.arange(N + 1) / N)
    for _ in range(100):
        p, p_prev = _legendre(N, x)
        step = (x * p - p_prev) / ((N + 1) * p)
        step[0] = step[-1] = 0.0
        x = x - step
        if np.max(np.abs(step)) < 1e-14:
            break
    x[0], x[-1] = -1.0, 1.0
    # enforce exact antisymmetry
    x = 0.5 * (x - x[::-1])
    return x


@lru_cache(maxsize=None)
def lgl_grid(node_count: int) -> CollocationGrid:
    """Build the Legendre-Gauss-Lobatto grid with ``node_count`` nodes.

    Parameters
    ----------
    node_count : int
        Number of nodes, N + 1 for polynomial degree N. Must be at least 2.
    """
    if isinstance(node_count, bool) or int(node_count) != node_count or node_count < 2:
        raise ValueError(f"node_count must be an integer >= 2, got {node_count!r}")
    node_count = int(node_count)
    N = node_count - 1
    x = _lgl_nodes(N)
    pN, _ = _legendre(N, x)
    w = 2.0 / (N * (N + 1) * pN**2)

    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    D = (pN[:, None] / pN[None, :]) / diff
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))

    bw = 1.0 / np.prod(diff, axis=1)
    bw = bw / np.max(np.abs(bw))

    for arr in (x, w, D, bw):
        arr.setflags(write=False)
    return CollocationGrid(node_count, x, w, D, bw)


def _check_length(grid: CollocationGrid, values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != grid.node_count:
        raise ValueError(
            f"expected {grid.node_count} nodal values along the last axis, got {values.shape[-1]}"
        )
    return values


def quadrature(grid: CollocationGrid, values, time_map: TimeMap | None = None):
    """Integrate nodal values over the mapped interval.

    Works along the last axis, so a (channels, nodes) array gives one integral per channel.
    """
    values = _check_length(grid, values)
    scale = 1.0 if time_map is None else time_map.scale
    return scale * (values @ grid.weights)


def differentiate(grid: CollocationGrid, values, time_map: TimeMap | None = None) -> np.ndarray:
    """Differentiate nodal values of a polynomial of degree <= N with respect to time."""
    values = _check_length(grid, values)
    scale = 1.0 if time_map is None else time_map.scale
    return (values @ grid.diff_matrix.T) / scale


def interpolate(grid: CollocationGrid, values, query_points) -> np.ndarray:
    """Barycentric Lagrange interpolation of nodal values at reference points in [-1, 1].

    ``values`` may have leading channel axes; the result has shape ``values.shape[:-1] + q.shape``.
    """
    values = _check_length(grid, values)
    q = np.atleast_1d(np.asarray(query_points, dtype=float))
    if np.any(q < -1.0 - 1e-14) or np.any(q > 1.0 + 1e-14) or not np.all(np.isfinite(q)):
        raise ValueError("query points must lie in [-1, 1]")
    diff = q[:, None] - grid.nodes[None, :]
    # snap near-coincident points to the node; the 1/diff kernel overflows otherwise
    exact = np.abs(diff) < 1e-14
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        kernel = grid.bary_weights[None, :] / diff
    hit = exact.any(axis=1)
    kernel[hit] = exact[hit].astype(float)
    kernel /= kernel.sum(axis=1, keepdims=True)
    out = values @ kernel.T
    return out.reshape(values.shape[:-1] + np.shape(query_points)) if np.ndim(query_points) else out[..., 0]
