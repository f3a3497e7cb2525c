import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ambiguity.collocation import TimeMap, differentiate, interpolate, lgl_grid, quadrature


@given(st.integers(2, 20), st.data())
@settings(max_examples=60, deadline=None)
def test_quadrature_exact_on_monomials(K, data):
    g = lgl_grid(K)
    deg = data.draw(st.integers(0, 2 * (K - 1) - 1))
    exact = (1 - (-1) ** (deg + 1)) / (deg + 1)
    assert abs(quadrature(g, g.nodes**deg) - exact) < 1e-10


@given(st.integers(2, 20), st.data())
@settings(max_examples=60, deadline=None)
def test_differentiation_exact_on_monomials(K, data):
    g = lgl_grid(K)
    deg = data.draw(st.integers(0, K - 1))
    expect = deg * g.nodes ** max(deg - 1, 0) if deg else np.zeros(K)
    assert np.max(np.abs(differentiate(g, g.nodes**deg) - expect)) < 1e-10


def test_nodes_are_sorted_symmetric_and_include_endpoints():
    for K in (2, 3, 7, 30):
        x = lgl_grid(K).nodes
        assert x[0] == -1.0 and x[-1] == 1.0
        assert np.all(np.diff(x) > 0)
        assert np.allclose(x, -x[::-1], atol=1e-15)


def test_known_five_point_grid():
    g = lgl_grid(5)
    assert np.allclose(g.nodes, [-1, -np.sqrt(3 / 7), 0, np.sqrt(3 / 7), 1], atol=1e-15)
    assert np.allclose(g.weights, [1 / 10, 49 / 90, 32 / 45, 49 / 90, 1 / 10], atol=1e-15)


def test_grids_are_cached_and_read_only():
    g = lgl_grid(9)
    with pytest.raises(ValueError):
        g.nodes[0] = 0.0


@pytest.mark.parametrize("bad", [1, 0, -3, 2.5, True])
def test_invalid_node_count(bad):
    with pytest.raises(ValueError):
        lgl_grid(bad)


def test_time_map_scaling():
    tm = TimeMap(2.0, 6.0)
    g = lgl_grid(8)
    t = tm.to_time(g.nodes)
    assert np.allclose(tm.to_reference(t), g.nodes)
    assert np.isclose(quadrature(g, t**3, tm), (6**4 - 2**4) / 4)
    assert np.allclose(differentiate(g, t**2, tm), 2 * t)


@pytest.mark.parametrize("t0,t1", [(1.0, 1.0), (2.0, 1.0), (0.0, np.inf)])
def test_degenerate_horizon(t0, t1):
    with pytest.raises(ValueError):
        TimeMap(t0, t1)


@given(st.integers(3, 16), st.lists(st.floats(-1, 1), min_size=1, max_size=8))
@settings(max_examples=40, deadline=None)
def test_interpolation_reproduces_polynomials(K, q):
    g = lgl_grid(K)
    coeffs = np.arange(1, K + 1) / K
    p = np.polynomial.polynomial.polyval
    vals = interpolate(g, p(g.nodes, coeffs), np.array(q))
    assert np.allclose(vals, p(np.array(q), coeffs), atol=1e-10)


def test_interpolation_at_nodes_and_channels():
    g = lgl_grid(6)
    V = np.vstack([g.nodes, g.nodes**2])
    assert np.allclose(interpolate(g, V, g.nodes), V)
    assert interpolate(g, V, 0.5).shape == (2,)
    with pytest.raises(ValueError):
        interpolate(g, V, 1.5)


def test_wrong_length_rejected():
    with pytest.raises(ValueError):
        quadrature(lgl_grid(5), np.ones(4))
