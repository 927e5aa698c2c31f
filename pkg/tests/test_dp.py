"""Backward induction, oracle, interpolation and trajectory extraction."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import SMALL_GRID, small_route, small_scenario
from ecodrive import dp
from ecodrive import kernels as K
from ecodrive.vehicle import EgoState, VehicleParams
from ecodrive.world import LeadSpec, Route, Scenario, TrafficLight, constant_lead


def _zero(v, soc, t):
    return np.zeros(np.broadcast(v, soc, t).shape)


def _j0(prob, vf):
    x0 = prob.x0
    return K.interp3(vf.J[0], prob.vax, prob.sax, prob.taxes[0], x0.v_mps, x0.soc_frac, x0.time_s, vf.mode)


# -- degenerate objectives ---------------------------------------------------


def test_zero_costs_give_zero_values():
    params = VehicleParams(fuel_idle_rate=0.0, willans_slope=0.0, k_batt=0.0)
    prob = dp.build_problem(small_scenario(), params, SMALL_GRID, gamma=1.0)
    vf, _ = dp.backward_induction(prob, terminal_cost=_zero)
    for J in vf.J:
        fin = J[np.isfinite(J)]
        assert fin.size > 0
        assert np.all(fin == 0.0)


def test_single_control_accumulates_stage_costs():
    # one control, cruise at a node speed: the value is the folded sum of stage costs
    params = VehicleParams(aux_elec_load_W=0.0)
    grid = dp.GridSpec(accels=(0.0,), engine_states=(1,), soc_min=0.23, soc_max=0.27)
    scn = Scenario("cruise", Route(200.0, ((0.0, 12.0),)), LeadSpec("none"), 10.0, 0.25, 5.0)
    prob = dp.build_problem(scn, params, grid)
    tc = dp.TerminalCost()
    vf, _ = dp.backward_induction(prob, terminal_cost=tc)
    traj = dp.simulate(prob, [0] * prob.n_steps, prob.x0, tc)
    assert np.all(traj.soc == 0.25)
    total = traj.terminal_cost
    for c in traj.stage_cost[::-1]:
        total = c + total
    assert _j0(prob, vf) == total


# -- oracle ------------------------------------------------------------------


def test_oracle_matches_dp_on_tiny_instances():
    feasible = 0
    for seed in range(40):
        prob = dp.random_tiny_problem(seed)
        assert prob.controls.shape[0] <= 6 and prob.n_steps <= 8
        try:
            vf, _ = dp.backward_induction(prob, mode="nearest")
            j0 = _j0(prob, vf)
        except dp.NoSolutionError:
            j0 = np.inf
        try:
            c, seq = dp.brute_force_oracle(prob)
        except dp.NoSolutionError:
            c = np.inf
        else:
            assert len(seq) == prob.n_steps
        assert c == j0
        feasible += np.isfinite(c)
    assert feasible >= 15


def test_oracle_single_stage():
    prob = dp.random_tiny_problem(3, n_steps=1)
    c, seq = dp.brute_force_oracle(prob)
    x0 = prob.x0
    J1 = dp.terminal_layer(prob, dp.TerminalCost())
    best = np.inf
    for a, e in prob.controls:
        tr = K.transition(prob.p, x0.v_mps, x0.soc_frac, x0.time_s, a, e > 0.5, prob.ds, prob.gamma,
                          prob.table[1], prob.jams, prob.vmin, prob.gap)
        if tr[0]:
            best = min(best, tr[4] + K.interp3(J1, prob.vax, prob.sax, prob.taxes[1], tr[1], tr[2], tr[3],
                                               K.MODE_NEAREST))
    assert c == best


def test_oracle_infeasible_start():
    prob = dp.random_tiny_problem(0)
    # a lead that never leaves enough room
    prob.table[1:, K.C_LEAD] = 1e6
    with pytest.raises(dp.NoSolutionError):
        dp.brute_force_oracle(prob)
    with pytest.raises(dp.NoSolutionError):
        dp.backward_induction(prob, mode="nearest")


def test_oracle_budget():
    prob = dp.random_tiny_problem(0)
    with pytest.raises(dp.BudgetExceededError):
        dp.brute_force_oracle(prob, budget=10)


# -- value function invariants -----------------------------------------------


def test_bellman_residual_zero(small_solution):
    _, prob, vf, _ = small_solution
    assert dp.bellman_residual(prob, vf) == 0.0


def test_terminal_layer_is_terminal_cost(small_solution):
    _, prob, vf, _ = small_solution
    expected = dp.terminal_layer(prob, dp.TerminalCost())
    assert np.array_equal(vf.J[-1], expected)


def test_values_bounded_below_by_recoverable_energy(small_solution):
    # regeneration can only return a fraction of the kinetic energy
    _, prob, vf, _ = small_solution
    p = prob.params
    v = dp._axis_nodes(prob.vax)
    bound = -prob.gamma * p.k_batt * p.regen_eff * 0.5 * p.equiv_mass_kg * v**2 / (p.lhv_J_per_g * p.fuel_norm_rate)
    for J in vf.J:
        assert not np.any(np.isnan(J))
        fin = np.isfinite(J)
        assert np.all(J[fin] >= np.broadcast_to(bound[:, None, None], J.shape)[fin])
        assert np.all(J[0][np.isfinite(J[0])] >= 0.0)


def test_policy_controls_within_bounds(small_solution):
    _, prob, _, pol = small_solution
    for P in pol.index:
        used = np.unique(P[P >= 0])
        for ic in used:
            a, e = prob.controls[ic]
            assert prob.params.accel_min <= a <= prob.params.accel_max
            assert e in (0.0, 1.0)


def test_velocity_axis_respects_base_limit():
    route = Route(300.0, ((0.0, 10.0), (100.0, 14.0)))
    prob = dp.build_problem(Scenario("lim", route, LeadSpec("none")), grid=SMALL_GRID)
    grid = dp.state_grid(prob)
    assert grid.velocity_axis(5).max() == 10.0
    assert grid.velocity_axis(20).max() == 14.0
    for s in range(grid.step_count + 1):
        assert np.all(np.diff(grid.time_axis(s)) > 0)


# -- dominance and monotonicity ----------------------------------------------


def test_jam_never_lowers_value():
    free = dp.build_problem(small_scenario(False), grid=SMALL_GRID)
    jam = dp.build_problem(small_scenario(True), grid=SMALL_GRID)
    assert np.array_equal(free.taxes, jam.taxes)
    for mode in ("nearest", "linear"):
        vf_free, _ = dp.backward_induction(free, mode=mode)
        vf_jam, _ = dp.backward_induction(jam, mode=mode)
        assert _j0(jam, vf_jam) >= _j0(free, vf_free)
        if mode == "nearest":
            for a, b in zip(vf_free.J, vf_jam.J):
                assert np.all(b >= a)


def test_travel_time_nonincreasing_as_gamma_drops():
    scn = small_scenario(length=400.0)
    times = []
    for g in (0.99, 0.9, 0.7, 0.5, 0.2):
        _, _, _, traj = dp.solve_scenario(scn, grid=SMALL_GRID, gamma=g)
        times.append(traj.travel_time_s)
    assert all(b <= a + 1e-9 for a, b in zip(times, times[1:]))


# -- admissible controls -----------------------------------------------------


def test_admissible_controls_jam_filter():
    prob = dp.build_problem(small_scenario(True), grid=SMALL_GRID)
    s = 35  # inside the jam, limit 10 m/s
    t = float(dp._axis_nodes(prob.taxes[s])[5])
    ctrls = dp.admissible_controls(EgoState(10.0, 0.25, t), s, prob)
    assert ctrls
    assert all(c.accel_mps2 <= 0.0 for c in ctrls)


def test_admissible_controls_red_light():
    prob = dp.build_problem(small_scenario(), grid=SMALL_GRID)
    s = 19  # the light sits at node 20; red on [25, 45) mod 40
    light = prob.route.light_at_node(20)
    for t in dp._axis_nodes(prob.taxes[s]):
        for c in dp.admissible_controls(EgoState(5.0, 0.25, float(t)), s, prob):
            tr = K.transition(prob.p, 5.0, 0.25, float(t), c.accel_mps2, c.engine_on == 1, prob.ds, prob.gamma,
                              prob.table[s + 1], prob.jams, prob.vmin, prob.gap)
            green = ((tr[5] - light.offset_s) % light.cycle_s) < light.green_s
            assert tr[1] == 0.0 or green


def test_admissible_controls_lead_gap():
    route = Route(300.0, ((0.0, 15.0),))
    lead = constant_lead(route, 10.0, 0.0)
    prob = dp.build_problem(Scenario("lead", route, LeadSpec("none"), 10.0, 0.25, 2.0), grid=SMALL_GRID, lead=lead)
    # lead passed x=100 at t=10; with the 2 s gap we may arrive at 110 m no earlier than t=13
    state = EgoState(10.0, 0.25, 12.0)
    ok = dp.admissible_controls(state, 10, prob)
    assert ok
    for c in ok:
        tr = K.transition(prob.p, 10.0, 0.25, 12.0, c.accel_mps2, c.engine_on == 1, prob.ds, prob.gamma,
                          prob.table[11], prob.jams, prob.vmin, prob.gap)
        assert tr[5] >= 11.0 + 2.0
    assert len(ok) < prob.controls.shape[0]


# -- interpolation -----------------------------------------------------------


def test_interpolate_at_node_and_midpoint(small_solution):
    _, prob, vf, _ = small_solution
    s = 10
    J = vf.J[s]
    v = dp._axis_nodes(prob.vax)
    soc = dp._axis_nodes(prob.sax)
    t = dp._axis_nodes(prob.taxes[s])
    i, j, k = next((i, j, k) for i, j, k in np.argwhere(np.isfinite(J)) if np.isfinite(J[i + 1, j, k]))
    assert dp.interpolate_value(vf, s, EgoState(v[i], soc[j], t[k])) == J[i, j, k]
    mid = dp.interpolate_value(vf, s, EgoState(0.5 * (v[i] + v[i + 1]), soc[j], t[k]))
    assert mid == pytest.approx(0.5 * (J[i, j, k] + J[i + 1, j, k]), rel=1e-12)


def test_interpolate_out_of_hull(small_solution):
    _, prob, vf, _ = small_solution
    with pytest.raises(dp.OutOfHullError):
        dp.interpolate_value(vf, 10, EgoState(5.0, 0.5, 10.0))


def test_interpolate_all_infeasible(small_solution):
    _, prob, vf, _ = small_solution
    with pytest.raises(dp.AllInfeasibleError):
        # one step in, nothing can already be at full speed
        dp.interpolate_value(vf, 1, EgoState(12.0, 0.25, float(dp._axis_nodes(prob.taxes[1])[0])))


# -- trajectories ------------------------------------------------------------


def test_extracted_trajectory_respects_constraints(small_solution):
    scn, prob, vf, pol = small_solution
    traj = dp.extract_trajectory(pol, vf, prob)
    assert len(traj.x_m) == prob.n_steps + 1
    for s, t_arr, t_dep, v in traj.light_arrivals(scn.route):
        lt = scn.route.light_at_node(s)
        if v > 0:
            assert ((t_arr - lt.offset_s) % lt.cycle_s) < lt.green_s
        assert ((t_dep - lt.offset_s) % lt.cycle_s) < lt.green_s or t_dep > t_arr
    assert np.all(traj.v_mps <= 12.0)
    assert np.all(np.diff(traj.t_s) > 0)
    assert traj.total_cost == pytest.approx(_j0(prob, vf), rel=0.05)


def test_zero_length_route():
    scn = Scenario("empty", Route(0.0), LeadSpec("none"))
    prob, vf, pol, traj = dp.solve_scenario(scn)
    assert prob.n_steps == 0
    assert traj.efc_g == 0.0 and traj.total_cost == 0.0 and traj.travel_time_s == 0.0


def test_lead_wait_samples_roundtrip():
    scn = Scenario("w", Route(300.0, ((0.0, 12.0),), 10.0, (TrafficLight(100.0, 60.0, 20.0, 10.0),)),
                   LeadSpec("none"), 0.0, 0.25, 0.0)
    _, _, _, traj = dp.solve_scenario(scn, grid=SMALL_GRID)
    lead = dp.trajectory_to_lead(traj)
    assert lead.t_s[0] == traj.t_s[0] and lead.x_m[-1] == 300.0
    assert np.all(np.diff(lead.t_s) > 0)


# -- persistence -------------------------------------------------------------


def test_value_function_roundtrip(tmp_path, small_solution):
    _, prob, vf, pol = small_solution
    path = tmp_path / "vf.bin"
    dp.save_value_function(vf, path, pol)
    back, pol2, header = dp.load_value_function(path)
    assert header["gamma"] == vf.gamma
    assert all(np.array_equal(a, b) for a, b in zip(vf.J, back.J))
    assert all(np.array_equal(a, b) for a, b in zip(pol.index, pol2.index))
    assert np.array_equal(back.taxes, vf.taxes)
    assert open(path, "rb").readline() == dp.VF_MAGIC


def test_value_function_csv(tmp_path, small_solution):
    _, _, vf, _ = small_solution
    path = tmp_path / "vf.csv"
    n = dp.dump_value_csv(vf, path)
    lines = open(path).read().splitlines()
    assert lines[0] == "s,v,soc,t,J"
    assert len(lines) == n + 1 == 1 + sum(int(np.isfinite(J).sum()) for J in vf.J)


def test_bad_value_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"nope\n")
    with pytest.raises(dp.DpError):
        dp.load_value_function(path)


def test_small_grid_size(small_solution):
    _, prob, vf, _ = small_solution
    assert prob.n_steps == 50
    assert max(J.size for J in vf.J) <= 5000
    assert small_route().length_m == 500.0
