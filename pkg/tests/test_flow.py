import math

import numpy as np
import pytest

from measure_expanders.errors import InputError
from measure_expanders.expander import Box, make_expander
from measure_expanders.fibre_measure import TWO_PI, Fibre, FibreMeasure
from measure_expanders.flow import (CONE, CUSP, NEUMANN, SMOOTH_ORIGIN, WALL, BoundaryCondition,
                                    FlowConfig, ImplicitStepper, TruncatedPlane,
                                    ball_bound, check_area_law_and_ball_inequality,
                                    check_comparison, check_self_similarity,
                                    check_u_over_t_monotone, comparison_margin, cusp_outflow,
                                    field_box_mass, init_from_expander, make_stepper, richardson,
                                    run_flow, step_implicit, strip_prepared, strip_profile,
                                    u_over_t_violation, wall_trace)
from measure_expanders.geometry import ConformalField, CylGrid
from measure_expanders.soliton_ode import cusp_sigma

C = Fibre.CIRCLE
LEB = FibreMeasure.lebesgue(C)


def strip_grid(nx=16, ny=64, lo=0.3):
    return CylGrid.strip(-1.0, 1.0, nx, lo, math.pi - lo, ny)


def strip_stepper(g, solver="pcg"):
    return ImplicitStepper(g, BoundaryCondition(NEUMANN), BoundaryCondition(NEUMANN),
                           BoundaryCondition(WALL), {"fibre": wall_trace(g)}, linear_solver=solver)


def test_boundary_condition_parse():
    assert BoundaryCondition.parse("cusp:1.0") == BoundaryCondition(CUSP, 1.0)
    assert BoundaryCondition.parse("Smooth-Origin").kind == SMOOTH_ORIGIN
    assert BoundaryCondition.parse("neumann:2").value == 2.0
    assert str(BoundaryCondition.parse("cusp:0.5")) == "cusp:0.5"
    assert BoundaryCondition(CONE).dirichlet and not BoundaryCondition(CUSP).dirichlet
    with pytest.raises(InputError):
        BoundaryCondition.parse("sticky")


def test_cusp_outflow_leading_and_corrected():
    t, sig = 0.7, np.array([5.0, 40.0])
    c, dc = cusp_outflow(2 * t / sig ** 2, t)
    assert np.allclose(c, 2 / sig) and np.allclose(dc, 1 / sig)
    s = np.array([10.0, 200.0])
    sg, dsg = cusp_sigma(s, 1.0)
    c, _ = cusp_outflow(2 * t / sg ** 2, t, alpha=1.0)
    assert np.allclose(c, 2 * dsg / sg, rtol=1e-12)


def test_step_zero_is_identity():
    g = strip_grid()
    f = ConformalField(g, strip_profile(g, 0.5), 0.5)
    st = strip_stepper(g)
    assert st.step(f, 0.0).field is f


def test_step_strip_exact_solution():
    errs = []
    for dt in (0.02, 0.01):
        g = strip_grid(ny=128)
        f = ConformalField(g, strip_profile(g, 0.5), 0.5)
        out = step_implicit(strip_stepper(g), f, dt)
        errs.append(np.max(np.abs(out.u / strip_profile(g, 0.5 + dt) - 1.0)))
    assert max(errs) < 2e-3
    assert out.t == pytest.approx(0.51)


def test_pcg_matches_direct():
    g = strip_grid(ny=32)
    f = ConformalField(g, strip_profile(g, 0.5) * (1 + 0.1 * np.cos(g.mesh()[0])), 0.5)
    a = step_implicit(strip_stepper(g, "pcg"), f, 0.05)
    b = step_implicit(strip_stepper(g, "direct"), f, 0.05)
    assert np.max(np.abs(a.u / b.u - 1.0)) < 1e-9


def test_gaussian_step_stationary():
    g = CylGrid.cylinder(-6.0, 3.0, 64, 1)
    e = make_expander("Ci", 2.0, None, LEB)
    f0 = init_from_expander(e, g, 0.5, eta_factor=0.0)
    cfg = FlowConfig(g, 0.5, 1.0, BoundaryCondition(SMOOTH_ORIGIN), BoundaryCondition(CONE),
                     expander=e, eta_factor=0.0)
    st = make_stepper(cfg, f0, 0.0)
    out = step_implicit(st, f0, 0.25)
    assert np.max(np.abs(out.u[:, 0] / np.exp(2 * g.x) - 1.0)) < 1e-10


def test_mass_balance_and_positivity():
    g = CylGrid.cylinder(-10.0, 4.0, 64, 16)
    e = make_expander("Biii", 1.0, 1.0, FibreMeasure(C, ((0.0, 1.0),), (1.0, 3.0), (0.5, 0.0)))
    f = init_from_expander(e, g, 0.01)
    cfg = FlowConfig(g, 0.01, 1.0, BoundaryCondition(CUSP, 1.0), BoundaryCondition(CONE), expander=e)
    st = make_stepper(cfg, f, 1e-3 * float(np.median(f.u)))
    for _ in range(5):
        res = st.step(f, 0.2 * f.t)
        assert np.all(res.field.u > 0.0)
        assert st.mass_balance_defect(f, res.field) <= 1e-3
        f = res.field


def test_init_from_expander_examples():
    g = CylGrid.cylinder(-3.0, 2.0, 21, 1)
    e = make_expander("Bii", 1.0, None, LEB)
    f = init_from_expander(e, g, 0.1)
    eta = 1e-3 * np.median(np.exp(g.x))
    assert np.allclose(f.u[:, 0], np.exp(g.x) + eta * 0.1, rtol=1e-14)
    g2 = CylGrid.cylinder(-1.0, 1.0, 11, 64)
    e2 = make_expander("Bii", 1.0, None, FibreMeasure.atom(C, 1.0, 2.0))
    f2 = init_from_expander(e2, g2, 0.1, eta_factor=0.0)
    # theta profile integrates to the atom mass per unit e^{x} weight
    assert np.allclose(f2.u.sum(axis=1) * g2.h_theta, 2.0 * np.exp(g2.x), rtol=1e-12)
    with pytest.raises(InputError):
        init_from_expander(e2, g2, 0.1, h=0.01)
    with pytest.raises(InputError):
        init_from_expander(e2, g, 0.1)          # single fibre node needs invariant nu


def test_flow_config_validation():
    g = CylGrid.cylinder(-1.0, 1.0, 16, 1)
    bc = BoundaryCondition(NEUMANN)
    with pytest.raises(InputError):
        FlowConfig(g, 1.0, 0.5, bc, bc)
    with pytest.raises(InputError):
        FlowConfig(g, 0.1, 1.0, bc, bc, output_times=(2.0,))
    assert FlowConfig(g, 0.1, 1.0, bc, bc, output_times=(0.5,)).output_times == (0.5, 1.0)


@pytest.fixture(scope="module")
def gaussian_traj():
    g = CylGrid.cylinder(-8.0, 3.0, 128, 1)
    e = make_expander("Ci", 2.0, None, LEB)
    cfg = FlowConfig(g, 0.25, 1.0, BoundaryCondition(SMOOTH_ORIGIN), BoundaryCondition(CONE),
                     expander=e, eta_factor=0.0, output_times=(0.5,), dt_rel=0.1)
    return run_flow(cfg)


@pytest.fixture(scope="module")
def strip_traj():
    g = strip_grid(nx=16, ny=32)
    cfg = FlowConfig(g, 0.1, 1.0, BoundaryCondition(NEUMANN), BoundaryCondition(NEUMANN),
                     BoundaryCondition(WALL), initial=strip_prepared(g, 0.1),
                     output_times=(0.25, 0.5), dt_rel=0.1)
    return run_flow(cfg)


def test_run_flow_gaussian_and_selfsim(gaussian_traj):
    tr = gaussian_traj
    assert tr.times == [0.25, 0.5, 1.0]
    for s in tr.snapshots:
        assert np.max(np.abs(s.u[:, 0] / np.exp(2 * s.grid.x) - 1.0)) <= 1e-8
    assert check_self_similarity(tr, 2.0, 0.0, 0.5, 1.0) <= 1e-10
    with pytest.raises(InputError):
        check_self_similarity(tr, 0.01, 0.0, 0.5, 1.0)     # shift exceeds the grid
    with pytest.raises(InputError):
        tr.at(0.3)


def test_strip_self_similar_and_monotone(strip_traj):
    tr = strip_traj
    base = tr.snapshots[0].u / tr.snapshots[0].t
    for s in tr.snapshots:
        assert np.max(np.abs(s.u / s.t / base - 1.0)) < 1e-9      # u/t constant
    assert check_u_over_t_monotone(tr)


def test_u_over_t_gaussian_strictly_decreasing(gaussian_traj):
    assert u_over_t_violation(gaussian_traj, skip_initial=False) < 0.0


def test_comparison_identical(gaussian_traj):
    assert comparison_margin(gaussian_traj, gaussian_traj) == 0.0
    assert check_comparison(gaussian_traj, gaussian_traj)


def test_comparison_ordered_and_swapped():
    g = CylGrid.cylinder(-20.0, 4.0, 64, 1)
    trs = []
    for c in (0.5, 1.0):
        e = make_expander("Bii", 1.0, None, FibreMeasure.lebesgue(C, c))
        trs.append(run_flow(FlowConfig(g, 0.01, 0.2, BoundaryCondition(CUSP, 1.0),
                                       BoundaryCondition(CONE), expander=e,
                                       output_times=(0.05, 0.1), dt_rel=0.1, linear_solver="direct")))
    assert check_comparison(trs[0], trs[1])
    assert not check_comparison(trs[1], trs[0])


def test_richardson_recovers_limit():
    ts = [1e-3, 2e-3, 4e-3]
    ms = [3.0 + 5.0 * t ** 0.5 for t in ts]
    m0, p = richardson(ts, ms)
    assert m0 == pytest.approx(3.0, rel=1e-12) and p == pytest.approx(0.5)
    assert richardson([1e-3, 2e-3], [1.0, 1.1]) == (1.0, None)


def test_field_box_mass_tail():
    g = CylGrid.cylinder(-6.0, 1.0, 281, 1)
    f = ConformalField(g, np.exp(2 * g.x), 0.0)
    m = field_box_mass(f, Box((-math.inf, 0.0), ((0.0, TWO_PI),)), SMOOTH_ORIGIN)
    assert m == pytest.approx(math.pi, rel=1e-3)
    with pytest.raises(InputError):
        field_box_mass(f, Box((-math.inf, 0.0), ((0.0, TWO_PI),)))


def test_ball_bound_and_truncated_plane():
    assert ball_bound(1.0, math.sqrt(2.0), 1.0) == pytest.approx(16 * math.pi)
    tp = TruncatedPlane(make_expander("Ci", 2.0, None, LEB), 0.0)
    assert tp.total() == pytest.approx(math.pi)
    assert tp.extinction_time == pytest.approx(0.25)
    assert tp.ball_mass(0.5) == pytest.approx(math.pi / 4)
    with pytest.raises(InputError):
        TruncatedPlane(make_expander("Bii", 1.0, None, LEB), 0.0)


def test_area_ball_rejects_out_of_range_time(gaussian_traj):
    tp = TruncatedPlane(make_expander("Ci", 2.0, None, LEB), 1.0)
    with pytest.raises(InputError):
        check_area_law_and_ball_inequality(gaussian_traj, tp, [(0.5, 1.0, 0.5)],
                                           fit_window=(0.0, 1.0))
