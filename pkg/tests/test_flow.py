import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad
from scipy.optimize import brentq

from qflow import flow as fl
from qflow.flow import (
    BlowUpDetected,
    FlowConfig,
    InfeasibleConstraint,
    constraint_residual,
    lambda_of,
    make_state,
    project_constraint,
    rhs,
    run_flow,
    solve_shift,
    step,
)
from qflow.geometry import SPHERE, TORUS, GridField, constant_field, grid_field, make_geometry
from qflow.operators import make_background

FAST = dict(f2_tol=1e-300, rhs_tol=1e-300)


def torus_bg(fn, q0=None, N=32):
    g = make_geometry(TORUS, 2, N)
    Q0 = None if q0 is None else constant_field(g, q0)
    return make_background(grid_field(g, fn), Q0)


def test_lambda_examples():
    gs = make_geometry(SPHERE, 4, 32)
    assert_allclose(lambda_of(constant_field(gs, 0.0), make_background(constant_field(gs, 6.0))), 1.0, rtol=1e-14)
    bg = torus_bg(lambda x, y: np.cos(x) + 0.5 * np.sin(y))
    assert lambda_of(constant_field(bg.geometry, 0.0), bg) == 0.0


def test_lambda_against_quadrature():
    bg = torus_bg(lambda x, y: np.cos(x), N=64)
    u = grid_field(bg.geometry, lambda x, y: 0.1 * np.cos(x))
    # Q e^{2u} = P0 u = 0.1 cos x; the y integral cancels
    num = quad(lambda x: np.cos(x) * 0.1 * np.cos(x), 0, 2 * math.pi)[0]
    den = quad(lambda x: np.cos(x) ** 2 * np.exp(0.2 * np.cos(x)), 0, 2 * math.pi)[0]
    assert_allclose(lambda_of(u, bg), num / den, rtol=1e-12)


def test_projection_feasible_is_noop():
    bg = torus_bg(lambda x, y: np.cos(x) - 0.3)
    u = project_constraint(constant_field(bg.geometry, 0.0), bg)
    assert solve_shift(u.values, bg) == 0.0


def test_projection_against_bisection():
    bg = torus_bg(lambda x, y: np.cos(x) + 0.1, N=64)
    c = solve_shift(np.zeros(bg.geometry.grid_shape), bg)

    def G(c):
        return quad(lambda x: (np.cos(x) + 0.1) * np.exp(2 * c * (np.cos(x) + 0.1)), 0, 2 * math.pi)[0]

    ref = brentq(G, -5, 0, xtol=1e-15)
    assert c < 0
    assert_allclose(c, ref, rtol=1e-10)
    v = c * bg.f.values
    assert abs(constraint_residual(v, bg)) <= 1e-12


def test_projection_nonzero_target():
    g = make_geometry(TORUS, 2, 32)
    bg = make_background(grid_field(g, lambda x, y: -1.0 - 0.5 * np.cos(x)), constant_field(g, -1.0))
    u = project_constraint(grid_field(g, lambda x, y: 0.3 * np.sin(y)), bg)
    assert abs(constraint_residual(u.values, bg)) <= 1e-12 * abs(bg.k_n)


def test_projection_infeasible():
    bg = torus_bg(lambda x, y: 1.0 + 0.5 * np.cos(x))
    with pytest.raises(InfeasibleConstraint):
        project_constraint(constant_field(bg.geometry, 0.0), bg)


def test_rhs_examples():
    bg = torus_bg(lambda x, y: np.cos(x))
    assert np.max(np.abs(rhs(constant_field(bg.geometry, 0.0), bg).values)) == 0.0
    gs = make_geometry(SPHERE, 4, 32)
    f = GridField(gs, 6.0 + gs.inverse(np.eye(33)[1]))
    bgs = make_background(f)
    lam = gs.quad(6 * f.values) / gs.quad(f.values**2)
    assert_allclose(rhs(constant_field(gs, 0.0), bgs).values, lam * f.values - 6.0, atol=1e-13)
    # stationary pair in the synthetic negative case
    g = make_geometry(TORUS, 2, 16)
    bgn = make_background(constant_field(g, -1.0), constant_field(g, -1.0))
    assert np.max(np.abs(rhs(constant_field(g, 0.0), bgn).values)) <= 1e-15


@pytest.mark.parametrize("scheme", ["imex-semi-implicit", "explicit-rk4"])
def test_step_fixed_point(scheme):
    gs = make_geometry(SPHERE, 4, 32)
    bg = make_background(constant_field(gs, 6.0))
    cfg = FlowConfig(scheme=scheme, dt=0.1)
    s0 = make_state(constant_field(gs, 0.0), bg, cfg)
    s1 = step(s0, bg, cfg)
    assert s1.t == pytest.approx(0.1)
    assert np.max(np.abs(s1.u.coeffs - s0.u.coeffs)) <= 1e-12


def test_run_immediate_fixed_points():
    gs = make_geometry(SPHERE, 4, 32)
    bg = make_background(constant_field(gs, 6.0))
    state, series = run_flow(constant_field(gs, 0.0), bg, FlowConfig())
    assert series.stop_reason in ("f2", "stationary")
    assert state.steps == 0 and state.lam == pytest.approx(1.0, abs=1e-14)
    g = make_geometry(TORUS, 2, 16)
    bgn = make_background(constant_field(g, -1.0), constant_field(g, -1.0))
    state, series = run_flow(constant_field(g, 0.0), bgn, FlowConfig())
    assert state.steps == 0 and state.lam == pytest.approx(1.0, abs=1e-14)


def test_run_case_ii_monotone_and_conservative():
    bg = torus_bg(lambda x, y: np.cos(x) - 0.3)
    u0 = grid_field(bg.geometry, lambda x, y: 0.2 * np.sin(y) + 0.1 * np.cos(x + y))
    cfg = FlowConfig(dt=1e-2, t_max=40.0, record_stride=1)
    state, series = run_flow(u0, bg, cfg)
    E = series["E"]
    assert np.all(np.diff(E) <= cfg.energy_slack)
    assert np.max(np.abs(series["constraint"])) <= 1e-12
    vol = series["volume"]
    assert np.max(np.abs(vol / vol[0] - 1)) <= 1e-9
    assert series.stop_reason in ("f2", "stationary")
    assert abs(state.lam) > 1e-3


def test_schemes_agree_on_short_horizon():
    bg = torus_bg(lambda x, y: np.cos(x) - 0.3)
    u0 = grid_field(bg.geometry, lambda x, y: 0.2 * np.sin(y))
    ends = []
    for scheme, dt in (("explicit-rk4", 1e-4), ("imex-semi-implicit", 1e-5)):
        cfg = FlowConfig(scheme=scheme, dt=dt, dt_policy="fixed", t_max=0.05 - dt / 2, **FAST)
        ends.append(run_flow(u0, bg, cfg)[0])
    assert ends[0].t == pytest.approx(ends[1].t, abs=1e-12)
    diff = ends[0].geometry.inverse(ends[0].u.coeffs - ends[1].u.coeffs)
    assert np.max(np.abs(diff)) <= 1e-5


def test_imex_first_order():
    bg = torus_bg(lambda x, y: np.cos(x) - 0.3, N=16)
    u0 = grid_field(bg.geometry, lambda x, y: 0.2 * np.sin(y))
    T = 0.2
    ref = run_flow(u0, bg, FlowConfig(scheme="explicit-rk4", dt=1e-4, dt_policy="fixed", t_max=T - 5e-5, **FAST))[0]
    errs = []
    for dt in (1e-2, 5e-3):
        s = run_flow(u0, bg, FlowConfig(dt=dt, dt_policy="fixed", t_max=T - dt / 2, **FAST))[0]
        assert s.t == pytest.approx(T)
        errs.append(np.max(np.abs(s.geometry.inverse(s.u.coeffs - ref.u.coeffs))))
    assert 1.6 < errs[0] / errs[1] < 2.4


def test_blow_up_detected():
    bg = torus_bg(lambda x, y: np.cos(x) - 0.3)
    u0 = grid_field(bg.geometry, lambda x, y: 0.5 * np.sin(y))
    with pytest.raises(BlowUpDetected) as info:
        run_flow(u0, bg, FlowConfig(u_ceiling=0.01))
    assert info.value.state is not None and len(info.value.series) >= 1


def test_time_limit_and_steps_limit():
    bg = torus_bg(lambda x, y: np.cos(x) - 0.3)
    u0 = grid_field(bg.geometry, lambda x, y: 0.5 * np.sin(y))
    _, series = run_flow(u0, bg, FlowConfig(t_max=0.05))
    assert series.stop_reason == "time"
    _, series = run_flow(u0, bg, FlowConfig(max_steps=3))
    assert series.stop_reason == "steps"


def test_adaptive_step_grows_and_respects_cap():
    bg = torus_bg(lambda x, y: np.cos(x) - 0.3)
    u0 = grid_field(bg.geometry, lambda x, y: 0.2 * np.sin(y))
    state, series = run_flow(u0, bg, FlowConfig(dt=1e-3, dt_max=0.05, t_max=5.0, record_stride=1))
    dts = series["dt"]
    assert dts.max() <= 0.05 and dts.max() > 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(scheme="euler")
    with pytest.raises(ValueError):
        FlowConfig(dt=-1.0)


def test_overflow_rejected():
    bg = torus_bg(lambda x, y: np.cos(x) - 0.3)
    with pytest.raises(fl.StepRejected):
        fl._evaluate(bg.geometry.forward(np.full(bg.geometry.grid_shape, 400.0)), bg)
