import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from synapse_sync.errors import (
    DegenerateFlowError,
    DomainError,
    GeometryError,
    NotNShapedError,
    OffBranchError,
)
from synapse_sync.neuron import (
    CoshTimeConstant,
    PiecewiseTimeConstant,
    Step,
    TanhSigmoid,
    TravelTimeTable,
    check_assumptions,
    compute_geometry,
    eval_f,
    family_margin_bound,
    fast_flow,
    fast_travel_table,
    knee_curves,
    knee_sensitivity,
    nullcline_root,
    piecewise_neuron,
    slope_bound,
    slow_flow,
    slow_interval,
    slow_travel_table,
    smooth_neuron,
)

from conftest import dense_knees, m_inf, x_null_oracle

conductances = st.tuples(st.floats(0.3, 0.75), st.floats(1.75, 2.25), st.floats(2.75, 3.25))


# --- nonlinearities -------------------------------------------------------


def test_sigmoid_values():
    s = TanhSigmoid(0.0, 0.15)
    assert s(0.0) == 0.5
    assert s(10.0) == pytest.approx(1.0)
    assert float(s(np.array([-10.0]))[0]) == pytest.approx(0.0)


@given(st.floats(-0.7, 1.0))
def test_sigmoid_derivative_matches_difference(v):
    s = TanhSigmoid(-0.1, 0.145)
    h = 1e-6
    assert s.derivative(v) == pytest.approx((s(v + h) - s(v - h)) / (2 * h), rel=1e-5, abs=1e-8)


def test_step_and_its_smoothing():
    s = Step(0.0)
    assert s(0.0) == 1.0 and s(-1e-12) == 0.0
    assert s.smooth(0.0, 1e-3) == pytest.approx(0.5)
    assert s.smooth(0.05, 1e-3) == pytest.approx(1.0)
    assert s.smooth(-0.2, 0.0) == 0.0


def test_cosh_time_constant_has_no_singular_limit():
    tc = CoshTimeConstant()
    assert tc(-0.1) == pytest.approx(1.0)
    with pytest.raises(GeometryError):
        tc.slow_limit(0.0)


def test_piecewise_profile_levels():
    tc = PiecewiseTimeConstant(tau_knee=30.0, tau_deep=5.0)
    eps = 1e-4
    assert tc(0.5, eps) == pytest.approx(0.01)
    assert tc(-0.1, eps) == pytest.approx(30.01)
    assert tc(-0.3, eps) == pytest.approx(5.01)
    assert tc.slow_limit(0.02) == 0.0 and tc.fast_rate(-0.1) == 0.0
    smooth = tc(np.array([-0.5, -0.1, 0.5]), eps, kappa=1e-4)
    assert np.allclose(smooth, [5.01, 30.01, 0.01], atol=1e-6)


def test_invalid_parameters_are_rejected():
    with pytest.raises(DomainError):
        PiecewiseTimeConstant(tau_knee=-1.0)
    with pytest.raises(DomainError):
        piecewise_neuron(-0.3, 1.75, 2.75)


# --- field and nullcline --------------------------------------------------


def test_field_matches_hand_evaluation(corner):
    x, v, m = 0.4, -0.2, 0.1
    want = 0.3 * (-0.4 - v) + 1.75 * m_inf(v) * (1 - v) + 2.75 * x * (-0.7 - v) + 0.4 + (1 - v) * m
    assert eval_f(corner, x, v, m) == pytest.approx(want, rel=1e-14)


def test_field_domain_check(corner):
    with pytest.raises(DomainError):
        eval_f(corner, 1.5, 0.0)
    assert np.isfinite(eval_f(corner, 1.5, 0.0, check_domain=False))


@settings(max_examples=60, deadline=None)
@given(conductances, st.floats(0.0, 0.36), st.floats(-0.65, 0.95))
def test_nullcline_root_zeroes_field(g, m, v):
    mdl = piecewise_neuron(*g)
    x = nullcline_root(mdl, m, v)
    assert abs(mdl.f(x, v, m)) < 1e-12 * (1 + abs(x))


def test_nullcline_root_needs_v_above_reversal(corner):
    with pytest.raises(GeometryError):
        nullcline_root(corner, 0.0, -0.7)


# --- knees ----------------------------------------------------------------

# Frozen from the brute-force oracle above (1e6-point grid).
CORNER_KNEES = {0.0: (0.3438226, 0.6802522), 0.36: (0.6467960, 0.8323305)}


@pytest.mark.parametrize("m", [0.0, 0.36])
def test_corner_knees_match_brute_force(corner, m):
    geo = compute_geometry(corner, m)
    lo, hi = dense_knees(0.3, 1.75, 2.75, m)
    assert geo.x_left == pytest.approx(lo, abs=1e-9)
    assert geo.x_right == pytest.approx(hi, abs=1e-9)
    assert (geo.x_left, geo.x_right) == pytest.approx(CORNER_KNEES[m], abs=1e-7)


def test_branches_invert_the_nullcline(corner):
    geo = compute_geometry(corner, 0.2)
    xs = np.linspace(geo.x_left, geo.x_right, 7)
    for branch in (geo.v_small, geo.v_middle, geo.v_large):
        v = branch(xs)
        assert np.allclose(geo.x_of_v(v), xs, atol=1e-11)
    assert np.all(geo.v_small(xs) <= geo.v_left + 1e-12)
    assert np.all(geo.v_large(xs) >= geo.v_right - 1e-12)


def test_off_branch_query_raises(corner):
    geo = compute_geometry(corner, 0.0)
    with pytest.raises(OffBranchError):
        geo.v_middle(geo.x_right + 0.01)


def test_level_outside_margin_raises(corner):
    with pytest.raises(DomainError):
        compute_geometry(corner, 0.5)
    with pytest.raises(DomainError):
        compute_geometry(corner, -0.01)


def test_flat_nullcline_is_not_n_shaped():
    mdl = piecewise_neuron(0.75, 0.05, 3.0, margin=0.0)
    with pytest.raises(NotNShapedError):
        compute_geometry(mdl, 0.0)


@settings(max_examples=25, deadline=None)
@given(conductances)
def test_knees_move_right_with_drive(g):
    lo, hi = knee_curves(piecewise_neuron(*g), np.linspace(0, 0.36, 20))
    assert np.all(np.diff(lo) > 0) and np.all(np.diff(hi) > 0)
    assert np.all(lo < hi)


def test_knee_sensitivity_formula_agrees_with_difference(corner):
    dl, dr = knee_sensitivity(corner, fd_check=True, rel_tol=1e-3)
    geo = compute_geometry(corner, 0.0)
    # Envelope argument: dx/dm at a knee is (E_syn - v) / (g_K (v - E_K)).
    assert dl == pytest.approx((1 - geo.v_left) / (2.75 * (geo.v_left + 0.7)))
    assert dr == pytest.approx((1 - geo.v_right) / (2.75 * (geo.v_right + 0.7)))
    assert (dl, dr) == pytest.approx((0.9304, 0.4116), abs=1e-4)


# --- assumption checks ----------------------------------------------------


def test_family_bound_golden_constants():
    fb = family_margin_bound((0.3, 0.75), (1.75, 2.25))
    # Hand evaluation of the slope bound at the threshold and at the gate voltage.
    b_th = 0.71 * 0.99 * (0.5 / 0.15) * (1 - math.tanh(0.01 / 0.15) ** 2) - 1.7 * m_inf(0.01)
    b_0 = 0.7 * 1.0 * (0.5 / 0.15) - 1.7 * 0.5
    assert fb.bound_at_threshold == pytest.approx(b_th, rel=1e-12)
    assert fb.bound_at_gate == pytest.approx(b_0, rel=1e-12)
    assert fb.bound_at_threshold == pytest.approx(1.4260, abs=1e-3)
    assert fb.bound_at_gate == pytest.approx(1.4833, abs=1e-3)
    assert fb.margin_bound == pytest.approx(1.1003, abs=1e-3)
    assert fb.passed


@settings(max_examples=40, deadline=None)
@given(conductances, st.floats(-0.2, 0.3))
def test_slope_bound_predicts_slope_sign(g, v):
    mdl = piecewise_neuron(*g)
    lhs = g[1] * slope_bound(mdl, v)
    rhs = g[0] * 0.3 + 0.4
    h = 1e-7
    slope = (nullcline_root(mdl, 0.0, v + h) - nullcline_root(mdl, 0.0, v - h)) / (2 * h)
    if abs(lhs - rhs) > 1e-6:
        assert (slope > 0) == (lhs > rhs)


@settings(max_examples=15, deadline=None)
@given(conductances)
def test_family_members_pass_every_check(g):
    rep = check_assumptions(piecewise_neuron(*g), grid_density=30)
    assert rep.passed, rep.failures()


def test_smooth_neuron_fails_singular_limit_check():
    rep = check_assumptions(smooth_neuron())
    assert rep.failures() == ["A2.limits"]


def test_excessive_margin_fails_margin_check():
    rep = check_assumptions(piecewise_neuron(0.75, 1.75, 2.75, margin=1.2))
    assert not rep.passed


# --- flows and travel-time tables -----------------------------------------


def analytic_slow_time(mdl, x):
    """Time to drift from x to the left knee: h = -x / tau with tau piecewise in x."""
    tc = mdl.time_constant
    x_lo = compute_geometry(mdl, 0.0).x_left
    x_b = x_null_oracle(mdl.g_L, mdl.g_Ca, mdl.g_K, 0.0, tc.v_break)
    x = np.asarray(x)
    near = tc.tau_knee * np.log(np.minimum(x, x_b) / x_lo)
    deep = tc.tau_deep * np.log(np.maximum(x, x_b) / x_b)
    return near + deep


def test_slow_and_fast_flow_signs(corner):
    lo, hi = slow_interval(corner)
    xs = np.linspace(lo, hi, 50)
    assert np.all(slow_flow(corner, xs) < 0)
    assert np.all(fast_flow(corner, 0.36, xs) > 0)
    assert np.allclose(fast_flow(corner, 0.2, xs[xs < compute_geometry(corner, 0.2).x_right]),
                       1 - xs[xs < compute_geometry(corner, 0.2).x_right])


def test_slow_flow_rejects_points_outside_interval(corner):
    with pytest.raises(DomainError):
        slow_flow(corner, 0.95)


def test_slow_table_matches_log_formula(corner, rng):
    tab = slow_travel_table(corner)
    xs = rng.uniform(tab.lower, tab.upper, 200)
    assert np.max(np.abs(tab(xs) - analytic_slow_time(corner, xs))) < 1e-10
    assert tab.total == pytest.approx(float(analytic_slow_time(corner, tab.upper)), abs=1e-10)


def test_fast_table_matches_log_formula(corner, rng):
    tab = fast_travel_table(corner, 0.3)
    xs = rng.uniform(tab.lower, tab.upper, 200)
    want = np.log((1 - tab.lower) / (1 - xs))
    assert np.max(np.abs(tab(xs) - want)) < 1e-10


def test_table_matches_quadrature_for_smooth_flow():
    tab = TravelTimeTable(lambda x: -(1 + x * x), 0.0, 2.0, min_nodes=2001)
    for x in (0.3, 1.1, 1.9):
        assert tab(x) == pytest.approx(quad(lambda z: 1 / (1 + z * z), 0, x, epsabs=1e-13)[0], abs=1e-11)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0))
def test_table_inverse_round_trip(u):
    tab = _shared_table()
    t = u * tab.total
    assert tab(tab.inverse(t)) == pytest.approx(t, abs=1e-12)
    x = tab.lower + u * (tab.upper - tab.lower)
    assert tab.inverse(tab(x)) == pytest.approx(x, abs=1e-12)


_TABLE = []


def _shared_table():
    if not _TABLE:
        _TABLE.append(slow_travel_table(piecewise_neuron(0.5, 2.0, 3.0), min_nodes=2001))
    return _TABLE[0]


def test_table_is_monotone():
    tab = _shared_table()
    xs = np.linspace(tab.lower, tab.upper, 5001)
    assert np.all(np.diff(tab(xs)) > 0)


def test_table_rejects_vanishing_flow():
    with pytest.raises(DegenerateFlowError):
        TravelTimeTable(lambda x: x - 0.5, 0.0, 1.0, min_nodes=101)


def test_table_query_outside_range(corner):
    tab = slow_travel_table(corner, min_nodes=1001)
    with pytest.raises(DomainError):
        tab(tab.upper + 0.1)
    with pytest.raises(DomainError):
        tab.inverse(-1.0)


@pytest.mark.parametrize("factor", [0.5, 3.0])
def test_time_rescaling_scales_travel_times(corner, factor):
    a = slow_travel_table(corner, min_nodes=2001)
    b = slow_travel_table(corner.with_time_scale(factor), min_nodes=2001)
    assert b.total == pytest.approx(factor * a.total, rel=1e-12)
    fa = fast_travel_table(corner, 0.1, min_nodes=2001)
    fb = fast_travel_table(corner.with_time_scale(factor), 0.1, min_nodes=2001)
    assert fb.total == pytest.approx(factor * fa.total, rel=1e-12)
