import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ambiguity.collocation import TimeMap, lgl_grid
from ambiguity.models import (
    CATALOG,
    LAUB_LOOMIS_K,
    LAUB_LOOMIS_X0,
    FourierControlSpace,
    SingularityError,
    afm,
    afm_force,
    catalog_entry,
    chain_matrix,
    chain_system,
    heat_neumann_input,
    heat_rod,
    heat_target,
    laub_loomis,
    nominal_input_variation,
    vehicle_entry,
    vehicle_network,
)
from ambiguity.transcription import simulate


def test_chain_coefficients():
    assert np.array_equal(chain_matrix(2), [[0, 1], [-1, -2]])
    assert np.array_equal(chain_matrix(3)[-1], [-1, -3, -3])
    # characteristic polynomial (s + 1)^n
    assert np.allclose(np.linalg.eigvals(chain_matrix(5)), -1.0, atol=1e-2)
    e = catalog_entry("chain", n=4)
    assert np.array_equal(e.x0, [0, 0, 0, 1]) and e.horizon == (0.0, 15.0)


@pytest.mark.parametrize("n", [1, 13, 2.5, True])
def test_chain_range(n):
    with pytest.raises(ValueError):
        chain_system(n)


def test_vehicle_feedback_vanishes_at_equilibrium():
    m = vehicle_network()
    d1, d2 = -2.0, -2.0
    # vehicle 2 at separation d1 from vehicle 1, vehicle 3 at d2 from their average, equal velocities
    x = np.array([0.0, 4.0, 1.0, 0.0, d1, 4.0, 1 + d1, 0.0, d1 / 2 + d2, 4.0, 1 + d1 / 2 + d2, 0.0])
    f = m.f(np.zeros(1), x[:, None], np.zeros((2, 1)), m.params)[:, 0]
    assert np.allclose(f[[5, 7, 9, 11]], 0.0)
    assert np.allclose(m.h(0, x[:, None], None, None)[:, 0], x[[4, 6, 8, 10]])
    assert np.allclose(m.e(0, x[:, None], None, None)[:, 0], x[[0, 2, 1, 3]])


def test_vehicle_nominal_readings():
    e = vehicle_entry()
    assert e.notes["v_max"] == 3.0
    assert nominal_input_variation("half-sine") == pytest.approx(2.0, rel=1e-6)
    # the literal formula oscillates fast and has a much larger variation than V_max
    assert nominal_input_variation("literal") > 3.0
    lit = vehicle_entry("literal").control(np.array([1.0]))
    assert lit[0, 0] == pytest.approx(np.sin(20 / np.pi))
    with pytest.raises(ValueError):
        vehicle_entry("other")


def test_laub_loomis_rhs_values():
    m = laub_loomis()
    x0 = LAUB_LOOMIS_X0[:, None]
    f = m.f(np.zeros(1), x0, np.zeros((0, 1)), LAUB_LOOMIS_K)[:, 0]
    assert f[0] == pytest.approx(2.0 * 1.3428 - 0.9 * 1.9675 * 1.2822, rel=1e-12)
    assert f[0] == pytest.approx(0.4151, abs=1e-4)
    f0 = m.f(np.zeros(1), np.zeros((7, 1)), np.zeros((0, 1)), LAUB_LOOMIS_K)[:, 0]
    assert np.allclose(f0, [0, 0, 0, LAUB_LOOMIS_K[6], 0, 0, 0])
    assert np.allclose(LAUB_LOOMIS_K[[0, 5, 9]], [2.0, 0.8, 0.8])
    est = m.e(np.zeros(3), np.zeros((7, 3)), None, LAUB_LOOMIS_K)
    assert est.shape == (3, 3) and np.allclose(est[:, 0], [2.0, 0.8, 0.8])


def test_laub_loomis_nominal_oscillates():
    e = catalog_entry("laub-loomis")
    tr = simulate(e.model, e.x0, TimeMap(0.0, 20.0), lgl_grid(80))
    dx1 = np.diff(tr.states[0])
    assert np.sum(np.diff(np.sign(dx1)) != 0) >= 2


def test_afm_force_and_guard():
    assert afm_force(0.0, 1.0) == pytest.approx(-0.1481 + 3.6e-6, rel=1e-14)
    assert afm_force(0.0, 1.0) == pytest.approx(-0.1480964, abs=1e-12)
    with pytest.raises(SingularityError):
        afm_force(-1.0, 1.0)
    m = afm()
    with pytest.raises(SingularityError):
        m.f(np.zeros(1), np.array([[-0.9999999], [0.0]]), np.array([[1.0], [0.0]]), m.params)


def test_afm_equilibrium_has_zero_rhs():
    from scipy.optimize import brentq

    x1 = brentq(lambda x: x - afm_force(x, 1.0) - 1.0, 0.0, 2.0)
    m = afm()
    f = m.f(np.zeros(1), np.array([[x1], [0.0]]), np.array([[1.0], [0.0]]), m.params)
    assert np.allclose(f, 0.0, atol=1e-12)
    e = catalog_entry("afm")
    assert e.notes["sigma"] == 0.03 and e.horizon == (0.0, 7.0)


def test_heat_rod_structure():
    m = heat_rod()
    A = m.info["A"]
    dr = 2 * np.pi / 31
    c = 0.14 / dr**2
    assert A[5, 4] == pytest.approx(c) and A[5, 6] == pytest.approx(c) and A[5, 5] == pytest.approx(-2 * c)
    assert A[0, 0] == pytest.approx(-2 * c) and A[0, 1] == pytest.approx(c)
    assert np.all(A[-1] == 0)
    assert np.allclose(m.f(np.zeros(1), np.zeros((31, 1)), np.zeros((1, 1)), m.params), 0.0)
    assert np.allclose(heat_target(1.0)[-1], np.sin(np.pi), atol=1e-12)
    x = np.random.default_rng(0).standard_normal(31)
    u = heat_neumann_input(m, x, [0.3])
    assert u == pytest.approx((0.3 - (A @ x)[-2]) / dr)
    with pytest.raises(ValueError):
        heat_rod(2)


def test_heat_rod_stays_at_rest():
    e = catalog_entry("heat-rod")
    tr = simulate(e.model, e.x0, TimeMap(*e.horizon), lgl_grid(10), e.control)
    assert np.all(tr.states == 0.0)


@given(st.integers(1, 6), st.integers(1, 6))
@settings(max_examples=20, deadline=None)
def test_fourier_gram_is_half_identity(k1, k2):
    if k1 == k2:
        return
    space = FourierControlSpace(k1, k2, 0.0, 7.0)
    assert np.allclose(space.gram(), 0.5 * np.eye(4), atol=1e-10)
    assert np.allclose(space.gram(normalized=False), 3.5 * np.eye(4), atol=1e-9)


def test_fourier_zero_frequency_drops_sine():
    s = FourierControlSpace(0, 1, 0.0, 7.0)
    assert s.terms == [("cos", 0), ("cos", 1), ("sin", 1)]
    assert np.allclose(s.gram(), np.diag([1.0, 0.5, 0.5]), atol=1e-10)
    assert s.evaluate([1.0, 0.0, 0.0], np.array([0.3, 2.0])) == pytest.approx([1.0, 1.0])
    shifted = FourierControlSpace(2, 3, 5.0, 12.0)
    assert np.allclose(shifted.basis(np.array([5.0]))[:, 0], [1, 0, 1, 0])
    with pytest.raises(ValueError):
        FourierControlSpace(2, 2)
    with pytest.raises(ValueError):
        FourierControlSpace(-1, 2)


@pytest.mark.parametrize("name", list(CATALOG))
def test_catalog_rhs_finite_on_sample_box(name):
    e = catalog_entry(name)
    m = e.model
    rng = np.random.default_rng(1)
    X = e.x0[:, None] + 0.1 * rng.standard_normal((m.state_dim, 16))
    U = rng.standard_normal((m.control_dim, 16))
    f = m.f(np.linspace(*e.horizon, 16), X, U, m.params)
    assert f.shape == (m.state_dim, 16) and np.all(np.isfinite(f))


def test_unknown_catalog_name():
    with pytest.raises(KeyError):
        catalog_entry("pendulum")
