from __future__ import annotations

import io
import json
from pathlib import Path

import cvxpy as cp
import numpy as np
import pytest
from scipy.optimize import brentq
from sklearn.base import clone

from _oracles import capability, grid_search_two_cells, random_pack
from rbess.cell import CellParams, CellState, ThermalNetworkParams
from rbess.exceptions import ClippedBoundWarning, DomainError, LikelyInfeasibleWarning, SolverError
from rbess.ocv import OcvSegment, default_ocv_curve
from rbess.optimizer import (
    BalancingConfig,
    HorizonPlan,
    PowerAllocator,
    balancing_constraints,
    build_problem,
    current_bounds_cone,
    dump_conic_form,
    energy_tolerance,
    extract_controls,
    loss_epigraph,
    pad_window,
    soc_bounds_energy,
    solve,
)
from rbess.topology import PackTopology, bypass

SEG = OcvSegment(0.0, 1.0, 3.3, 0.6)


def _cfg(**kw):
    base = dict(horizon_h=1, dt=1.0)
    base.update(kw)
    return BalancingConfig(**base)


# --- constraint builders ---------------------------------------------------

def test_loss_epigraph_hand_value():
    p_l = cp.Variable()
    cons = loss_epigraph(p_l, 36.0, 97200.0, r_total=46.3e-3, c_equiv=15000.0)
    cp.Problem(cp.Minimize(p_l), cons).solve(solver=cp.CLARABEL)
    assert p_l.value == pytest.approx(4.63, rel=1e-6)
    assert p_l.value == pytest.approx(46.3e-3 * 10.0 ** 2, rel=1e-6)


def test_loss_epigraph_zero_power():
    p_l = cp.Variable()
    cp.Problem(cp.Minimize(p_l), loss_epigraph(p_l, 0.0, 97200.0, 46.3e-3, 15000.0)).solve(
        solver=cp.CLARABEL)
    assert abs(p_l.value) < 1e-7


def _extreme(i_min, i_max, sense):
    p_b = cp.Variable()
    cons = current_bounds_cone(p_b, cp.Constant(97200.0), i_min, i_max, 15000.0)
    obj = cp.Maximize(p_b) if sense > 0 else cp.Minimize(p_b)
    cp.Problem(obj, cons).solve(solver=cp.CLARABEL)
    return p_b.value


def test_current_bounds_cone():
    assert _extreme(-10.0, 10.0, +1) == pytest.approx(36.0, rel=1e-7)
    assert _extreme(-10.0, 10.0, -1) == pytest.approx(-36.0, rel=1e-7)
    assert _extreme(0.0, 10.0, -1) == pytest.approx(0.0, abs=1e-7)


def test_current_bounds_reject_positive_minimum():
    with pytest.raises(DomainError):
        current_bounds_cone(cp.Variable(), cp.Constant(1.0), 1.0, 10.0, 15000.0)


def test_soc_bounds_energy_hand_values():
    lo, hi = soc_bounds_energy(0.05, 0.95, SEG, 15000.0)
    assert lo == pytest.approx(0.5 * 15000 * 3.33 ** 2)
    assert lo == pytest.approx(83166.75)
    # 3.87**2 = 14.9769, so the upper bound is 112326.75 J
    assert hi == pytest.approx(0.5 * 15000 * 3.87 ** 2)
    assert hi == pytest.approx(112326.75, abs=1e-6)


def test_soc_bounds_degenerate_box():
    lo, hi = soc_bounds_energy(0.4, 0.4, SEG, 15000.0)
    assert lo == hi


def test_soc_bounds_clipped_with_warning():
    seg = OcvSegment(0.1, 0.6, 3.4, 0.6)
    with pytest.warns(ClippedBoundWarning):
        lo, hi = soc_bounds_energy(0.05, 0.95, seg, 2.0)
    assert lo == pytest.approx(seg.voltage(0.1) ** 2)
    assert hi == pytest.approx(seg.voltage(0.6) ** 2)


def test_energy_tolerance_hand_value():
    assert energy_tolerance(SEG, 0.01) == pytest.approx(3.306 ** 2 - 3.3 ** 2)
    assert energy_tolerance(SEG, 0.01) == pytest.approx(0.039636, abs=1e-9)


def test_balancing_identical_cells_need_no_slack():
    w = cp.Constant(np.full((3, 2), 12.96))
    T = cp.Constant(np.full((3, 2), 300.0))
    xi_e, xi_t = cp.Variable((3, 2)), cp.Variable((3, 2))
    cons = balancing_constraints(w, T, np.full(3, 0.04), 0.5, xi_e, xi_t)
    cp.Problem(cp.Minimize(cp.sum(xi_e) + cp.sum(xi_t)), cons).solve(solver=cp.CLARABEL)
    assert np.max(np.abs(xi_e.value)) < 1e-8 and np.max(np.abs(xi_t.value)) < 1e-8


# --- whole problem ---------------------------------------------------------

def test_idle_single_cell(linear_cell):
    prob = build_problem([CellState(0.5, 300.0)], [linear_cell], [1], [0.0], _cfg())
    plan = solve(prob)
    assert plan.optimal
    assert abs(plan.p_b[0, 0]) < 1e-7 and abs(plan.p_l[0, 0]) < 1e-7
    assert abs(plan.objective) < 1e-6


def test_idle_horizon_keeps_zero_trajectory(linear_cell):
    states = [CellState(0.5, 298.0)] * 3
    plan = solve(build_problem(states, [linear_cell] * 3, [1, 2, 3], np.zeros(5),
                               _cfg(horizon_h=5), ThermalNetworkParams(t_env=298.0)))
    assert plan.optimal
    # the loss is quadratic in P_b, so a 1e-12 W objective leaves P_b near 1e-6 W
    assert np.max(np.abs(plan.p_b)) < 1e-5
    assert abs(plan.objective) < 1e-9


def test_symmetric_split_matches_root_find(linear_cell):
    states = [CellState(0.5, 300.0)] * 2
    plan = solve(build_problem(states, [linear_cell] * 2, [1, 2], [20.0], _cfg()))
    r, u = linear_cell.r_total, 3.6
    expect = brentq(lambda p: p - r * (p / u) ** 2 - 10.0, 0.0, 30.0)
    assert plan.p_b[:, 0] == pytest.approx([expect, expect], rel=1e-6)
    assert expect > 10.0


def test_higher_resistance_gets_less_power(linear_cell):
    states = [CellState(0.5, 300.0)] * 2
    params = [linear_cell, linear_cell.with_(r_int=0.06)]
    plan = solve(build_problem(states, params, [1, 2], [30.0], _cfg()))
    assert abs(plan.p_b[1, 0]) < abs(plan.p_b[0, 0])
    ref = grid_search_two_cells(states, params, 30.0, _cfg(), ThermalNetworkParams())
    assert plan.p_b[0, 0] == pytest.approx(ref[2], abs=5e-3)


def test_matches_grid_oracle():
    rng = np.random.default_rng(3)
    net = ThermalNetworkParams()
    for _ in range(8):
        params, states = random_pack(rng, 2, soc_spread=0.03, temp_spread=2.0)
        cfg = _cfg(lambda_e=float(rng.uniform(1, 20)), lambda_t=float(rng.uniform(0.1, 2)))
        demand = float(rng.uniform(-0.3, 1.0) * capability(states, params, 1, 1.0))
        plan = solve(build_problem(states, params, [1, 2], [demand], cfg, net))
        ref = grid_search_two_cells(states, params, demand, cfg, net)
        assert plan.optimal
        assert plan.objective <= ref[0] + 1e-6
        assert plan.objective == pytest.approx(ref[0], rel=1e-3, abs=1e-6)


def test_out_of_band_start_needs_positive_slack(linear_cell):
    # cell 3 sits 3.5 % above the others
    states = [CellState(0.5, 300.0), CellState(0.5, 300.0), CellState(0.5 + 0.035 * 1.5, 300.0)]
    prob = build_problem(states, [linear_cell] * 3, [1, 2, 3], [10.0] * 3, _cfg(horizon_h=3))
    plan = solve(prob)
    assert plan.optimal
    assert plan.xi_e[2, 0] > 0


def test_full_size_problem_is_optimal():
    rng = np.random.default_rng(0)
    params, states = random_pack(rng, 15, base=CellParams(r_conv_dc=0.0, r_switch=0.0))
    cfg = BalancingConfig(horizon_h=20, dt=1.0)
    prob = build_problem(states, params, range(1, 16), np.full(20, 300.0), cfg)
    plan = solve(prob)
    assert plan.optimal
    assert plan.p_b.shape == (15, 20) and plan.p_l.shape == (15, 20)
    assert plan.e.shape == (15, 21) and plan.temp.shape == (15, 21)
    assert np.max(np.abs(plan.demand_residual)) <= 1e-6 * 300.0
    active = np.abs(plan.p_b) > 1e-6
    assert np.all(np.abs(plan.tightness[active]) <= 1e-6 * np.maximum(plan.p_l[active], 1e-300))


def test_empty_in_service_set(linear_cell):
    with pytest.raises(DomainError):
        build_problem([CellState(0.5, 300.0)], [linear_cell], [], [0.0], _cfg())


def test_demand_window_length(linear_cell):
    with pytest.raises(DomainError):
        build_problem([CellState(0.5, 300.0)], [linear_cell], [1], [0.0, 1.0], _cfg())


def test_excess_demand_warns_and_reports_infeasible(linear_cell):
    with pytest.warns(LikelyInfeasibleWarning):
        prob = build_problem([CellState(0.5, 300.0)] * 2, [linear_cell] * 2, [1, 2], [500.0], _cfg())
    plan = solve(prob)
    assert plan.status == "infeasible"
    with pytest.raises(SolverError):
        extract_controls(plan)


def test_topology_argument_filters_cells(linear_cell):
    topo = bypass(PackTopology.series(3), 2)
    prob = build_problem([CellState(0.5, 300.0)] * 3, [linear_cell] * 3, topo, [5.0], _cfg())
    plan = solve(prob)
    controls = extract_controls(plan)
    assert set(controls) == {1, 3}


def test_extract_controls_inverts_power():
    plan = HorizonPlan(cells=(1, 2), status="optimal", p_b=np.array([[36.0], [0.0]]),
                       u0=np.array([3.6, 3.7]))
    assert extract_controls(plan) == {1: (36.0, pytest.approx(10.0)), 2: (0.0, 0.0)}


def test_qp_formulation_agrees_with_cone():
    rng = np.random.default_rng(11)
    base = CellParams(r_conv_dc=0.0, r_switch=0.0)
    params, states = random_pack(rng, 15, soc_spread=0.04, temp_spread=3.0, base=base)
    cfg = BalancingConfig(horizon_h=20, dt=1.0)
    demand = np.linspace(150.0, 300.0, 20)
    cone = solve(build_problem(states, params, range(1, 16), demand, cfg))
    qp = solve(build_problem(states, params, range(1, 16), demand, cfg, formulation="qp"))
    assert cone.optimal and qp.optimal
    assert qp.objective == pytest.approx(cone.objective, rel=1e-2)


def test_penalty_monotonicity():
    rng = np.random.default_rng(5)
    for _ in range(3):
        params, states = random_pack(rng, 4, soc_spread=0.06, temp_spread=4.0)
        demand = np.full(5, capability(states, params, 5, 1.0))
        total = []
        for scale in (1.0, 2.0, 4.0):
            cfg = BalancingConfig(horizon_h=5, lambda_e=0.5 * scale, lambda_t=0.1 * scale)
            plan = solve(build_problem(states, params, range(1, 5), demand, cfg))
            assert plan.optimal
            total.append(plan.xi_e.sum() + plan.xi_t.sum())
        assert total[1] <= total[0] + 1e-6 and total[2] <= total[1] + 1e-6


# --- I/O -------------------------------------------------------------------

def test_plan_csv(linear_cell):
    plan = solve(build_problem([CellState(0.5, 300.0)] * 2, [linear_cell] * 2, [1, 2], [5.0, 5.0],
                               _cfg(horizon_h=2)))
    text = plan.to_csv(dt=2.0)
    lines = text.splitlines()
    assert lines[0] == "k,t_s,cell,p_b_w,p_l_w,e_j,temp_k,xi_e,xi_t"
    assert len(lines) == 1 + 3 * 2
    assert lines[-1].startswith("2,4.0,2,,,")
    buf = io.StringIO()
    plan.to_csv(buf, dt=2.0)
    assert buf.getvalue() == text


def test_conic_dump_structure(linear_cell):
    prob = build_problem([CellState(0.5, 300.0)] * 2, [linear_cell] * 2, [1, 2], [5.0, 5.0],
                         _cfg(horizon_h=2))
    text = dump_conic_form(prob)
    lines = text.splitlines()
    assert lines[0].startswith("# rbess conic standard form v1")
    n_var = int(lines[1].split()[1])
    n_row = int(lines[2].split()[1])
    cones = dict(kv.split("=") for kv in lines[3].split()[1:])
    soc = [int(s) for s in cones["soc"].split(",") if s]
    assert int(cones["zero"]) + int(cones["nonneg"]) + sum(soc) == n_row
    a_start, b_start = lines.index("A"), lines.index("b")
    for row in lines[a_start + 1:b_start]:
        i, j, _ = row.split()
        assert 0 <= int(i) < n_row and 0 <= int(j) < n_var
    with pytest.raises(DomainError):
        dump_conic_form(build_problem([CellState(0.5, 300.0)], [linear_cell], [1], [1.0], _cfg(),
                                      formulation="qp"))


def test_pad_window_holds_last_value():
    assert list(pad_window([1.0, 2.0, 3.0], 1, 4)) == [2.0, 3.0, 3.0, 3.0]
    assert list(pad_window([1.0, 2.0, 3.0], 0, 2)) == [1.0, 2.0]


def test_allocator_params_and_predict(linear_cell):
    alloc = PowerAllocator(config=_cfg())
    assert set(alloc.get_params()) == {"config", "net", "formulation", "tol"}
    copy = clone(alloc).set_params(tol=1e-7)
    assert copy.tol == 1e-7 and alloc.tol == 1e-6
    with pytest.raises(ValueError):
        alloc.set_params(bogus=1)
    out = alloc.predict([CellState(0.5, 300.0)] * 2, [linear_cell] * 2, [1, 2], [20.0])
    assert out[1] == pytest.approx(out[2], rel=1e-6)


def test_config_validation():
    for bad in (dict(delta_q=-0.1), dict(lambda_e=0.0), dict(horizon_h=0), dict(horizon_h=2.5), dict(dt=0)):
        with pytest.raises(DomainError):
            BalancingConfig(**bad)


def test_piecewise_curve_uses_segment_of_current_soc():
    cell = CellParams(ocv=default_ocv_curve())
    prob = build_problem([CellState(0.65, 300.0)], [cell], [1], [1.0], _cfg())
    assert prob.segments[0] == cell.ocv.segment_at(0.65)
    # the SoC floor lies outside this segment and is extrapolated on the segment line
    assert prob.w_min[0] == pytest.approx(prob.segments[0].voltage(cell.q_min) ** 2)


def test_captured_stall_case_solves():
    # idle-then-ramp window from the 15-cell run with cell 4 bypassed; one
    # scaling of the loss cone used to stall here
    data = json.loads((Path(__file__).parent / "data" / "stall_case.json").read_text())
    n = data["n"]
    states = [CellState(q=0.5, temp=data["t_bypassed"]) for _ in range(n)]
    params = [CellParams(r_conv_dc=0.0, r_switch=0.0) for _ in range(n)]
    for row, r in zip(data["cells"], data["r_int"]):
        states[row["cell"] - 1] = CellState(q=row["q"], temp=row["temp"])
        params[row["cell"] - 1] = CellParams(r_int=r, r_conv_dc=0.0, r_switch=0.0)
    cells = [row["cell"] for row in data["cells"]]
    net = ThermalNetworkParams(r_conv=41.05, r_cnd=26.6, t_env=298.0)
    prob = build_problem(states, params, cells, data["demand"],
                         BalancingConfig(horizon_h=len(data["demand"])), net)
    plan = solve(prob)
    assert plan.status == "optimal", plan.diagnostics
    assert plan.p_b[:, 0].sum() == pytest.approx(0.0, abs=1e-6)
