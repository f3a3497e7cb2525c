import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ambiguity.collocation import TimeMap, lgl_grid
from ambiguity.models import chain_system, laub_loomis, vehicle_entry
from ambiguity.nlp_solver import check_gradients
from ambiguity.transcription import (
    ConstraintSet,
    DynamicsModel,
    Objective,
    OutputTube,
    Trajectory,
    TrajectoryMetric,
    Transcription,
    _extrapolation_weights,
    collocate,
    encode_variation_constraint,
    metric_value,
    resimulation_residual,
    simulate,
    total_variation,
)


def decay_model():
    return DynamicsModel("decay", 1, 1, 1, lambda t, x, u, p: -p[0] * x + u, params=[0.5])


def test_metric_values_on_constants():
    g, tm = lgl_grid(7), TimeMap(0.0, 2.0)
    ones = np.ones((1, 7))
    assert np.isclose(metric_value(TrajectoryMetric("L2"), ones, g, tm), np.sqrt(2.0))
    assert np.isclose(metric_value(TrajectoryMetric("L2", time_normalized=True), ones, g, tm), 1.0)
    v = np.vstack([np.linspace(-3, 1, 7), np.zeros(7)])
    assert metric_value(TrajectoryMetric("Linf"), v, g, tm) == 3.0
    assert metric_value(TrajectoryMetric("Linf", weights=(2.0, 1.0)), v, g, tm) == 6.0
    assert np.isclose(metric_value(TrajectoryMetric("initial_value_norm"), v, g, tm), 3.0)
    assert np.isclose(metric_value(TrajectoryMetric("final_value_norm"), v, g, tm), 1.0)


def test_metric_validation():
    with pytest.raises(ValueError):
        TrajectoryMetric("L1")
    with pytest.raises(ValueError):
        TrajectoryMetric("L2", weights=(1.0, -1.0))
    with pytest.raises(ValueError):
        Objective(TrajectoryMetric("Linf"), "maximize")
    with pytest.raises(ValueError):
        ConstraintSet(variation_bounds={0: np.inf})
    with pytest.raises(ValueError):
        OutputTube(-1.0)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=20), st.floats(0, 50))
@settings(max_examples=50, deadline=None)
def test_variation_rows_match_total_variation(u, vmax):
    rows = encode_variation_constraint(u, vmax)
    assert np.isclose(rows[-1], total_variation(u) - vmax)
    assert np.all(rows[:-1] <= 1e-12)


def test_extrapolation_weights_exact_for_low_degree():
    g = lgl_grid(9)
    e = _extrapolation_weights(g)
    for deg in range(g.node_count - 1):
        assert np.isclose(e @ g.nodes[1:] ** deg, (-1.0) ** deg, atol=1e-9)


def test_simulate_matches_closed_form():
    m = decay_model()
    g, tm = lgl_grid(12), TimeMap(0.0, 3.0)
    tr = simulate(m, [2.0], tm, g, control=lambda t: np.zeros_like(t))
    assert np.allclose(tr.states[0], 2.0 * np.exp(-0.5 * tr.times), rtol=1e-10)
    assert resimulation_residual(m, tr) < 1e-10


def test_collocate_zeroes_defects():
    m = chain_system(4)
    g, tm = lgl_grid(10), TimeMap(0.0, 15.0)
    x0 = np.eye(4)[-1]
    tr = collocate(m, x0, tm, g)
    D = g.diff_matrix
    defect = tr.states @ D.T - tm.scale * m.f(tr.times, tr.states, tr.controls, tr.params)
    assert np.max(np.abs(defect[:, 1:])) < 1e-10
    assert np.array_equal(tr.states[:, 0], x0)
    fine = lgl_grid(40)
    assert np.allclose(collocate(m, x0, tm, fine).states, simulate(m, x0, tm, fine).states, atol=1e-8)


def _tr(model, nominal, objective, cs, **kw):
    return Transcription(model, nominal, objective, cs, **kw)


def test_encode_decode_round_trip_plain_and_centered():
    e = vehicle_entry()
    g, tm = lgl_grid(8), TimeMap(*e.horizon)
    nom = collocate(e.model, e.x0, tm, g, e.control)
    cs = ConstraintSet(output_tubes=[OutputTube(1e-2, channels=[0, 2])], initial_state="free", free_controls=[0],
                       variation_bounds={0: 3.0})
    obj = Objective(TrajectoryMetric("L2"), "maximize", "estimand", channels=[0])
    for kw in ({}, {"deviation_scale": 1e-2, "deviation_bound": 64.0}):
        tr = _tr(e.model, nom, obj, cs, **kw)
        z = tr.encode(nom)
        back = tr.decode(z)
        assert np.allclose(back.states, nom.states) and np.allclose(back.controls, nom.controls)
        assert tr.objective_metric(z) == pytest.approx(0.0, abs=1e-12)
        # defects vanish; the u(t0) extrapolation row carries the polynomial-fit error of the sine input
        assert np.max(np.abs(tr.eq(z))) < 1e-6
        assert np.all(tr.ineq(z) <= 1e-8)
    # centered coordinates put the nominal at the origin
    assert np.allclose(tr.encode(nom)[:tr.n_core], 0.0)


def test_analytic_derivatives_match_differences():
    m = laub_loomis()
    g, tm = lgl_grid(6), TimeMap(0.0, 2.0)
    nom = collocate(m, np.full(7, 0.5), tm, g)
    lo, hi = m.params * 0.5, m.params * 1.5
    cs = ConstraintSet(output_tubes=[OutputTube(1e-2, TrajectoryMetric("L2"))], initial_state="fixed",
                       param_box=(lo, hi))
    tr = _tr(m, nom, Objective(TrajectoryMetric("initial_value_norm"), "maximize", "estimand"), cs,
             deviation_scale=1e-2)
    rng = np.random.default_rng(0)
    z0 = tr.encode(nom)
    pts = z0 + 0.3 * rng.standard_normal((5, z0.size))
    assert check_gradients(tr.problem(), pts) < 1e-4


def test_bad_channels_rejected():
    m = chain_system(2)
    g, tm = lgl_grid(6), TimeMap(0.0, 1.0)
    nom = simulate(m, [0.0, 1.0], tm, g)
    with pytest.raises(ValueError):
        _tr(m, nom, Objective(TrajectoryMetric("L2")), ConstraintSet(free_controls=[3]))
    with pytest.raises(ValueError):
        _tr(m, nom, Objective(TrajectoryMetric("L2")), ConstraintSet(initial_state=np.zeros(3)))
    with pytest.raises(ValueError):
        Trajectory(g, tm, np.zeros((2, 5)), np.zeros((0, 6)), [])
