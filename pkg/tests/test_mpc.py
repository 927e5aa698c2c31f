"""Proxy projection, lead detection and the closed-loop controller."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import SMALL_GRID, small_scenario
from ecodrive import dp, mpc
from ecodrive import terminal as T
from ecodrive.vehicle import EgoState, VehicleParams
from ecodrive.world import Route, TrafficJam, TrafficLight, constant_lead


def _zero_net(n_in=13, gamma=0.9):
    return T.TerminalCostNet([np.zeros((n_in, 1))], [np.zeros(1)], np.zeros(n_in), np.ones(n_in), 0.0, 1.0,
                             meta={"gamma": gamma})


def _random_net(n_in, seed, gamma=0.9):
    # positive, smooth and decreasing in the remaining distance feature
    rng = np.random.default_rng(seed)
    W0 = rng.normal(0.0, 0.3, (n_in, 8))
    W1 = np.abs(rng.normal(0.0, 0.3, (8, 1)))
    return T.TerminalCostNet([W0, W1], [np.zeros(8), np.zeros(1)], np.zeros(n_in), np.full(n_in, 50.0), 20.0, 5.0,
                             meta={"gamma": gamma})


@pytest.fixture(scope="module")
def nets():
    return _random_net(13, 0), _random_net(16, 1)


# -- proxy -------------------------------------------------------------------


def test_proxy_uniform_motion():
    proj = mpc.project_proxy((0.0, 0.0, 10.0, 0.0), Route(1000.0, ((0.0, 17.0),)), 400.0)
    assert np.allclose(proj.v_mps, 10.0)
    assert proj.position_at(20.0) == pytest.approx(200.0)
    assert proj.x_m[-1] >= 400.0
    assert not proj.jam_interaction


def test_proxy_slows_inside_jam():
    jam = TrafficJam(300.0, 600.0, 0.0, 1e4, 100.0, 0.1, 20.0)
    route = Route(1000.0, ((0.0, 17.0),), 10.0, (), (jam,))
    proj = mpc.project_proxy((0.0, 0.0, 17.0, 0.0), route, 800.0)
    inside = (proj.x_m > 310.0) & (proj.x_m < 590.0)
    assert np.allclose(proj.v_mps[inside], 10.0)
    assert np.all(proj.v_mps[proj.x_m < 280.0] == 17.0)
    assert proj.jam_interaction


def test_proxy_braking_to_rest():
    proj = mpc.project_proxy((0.0, 0.0, 5.0, -1.0), Route(1000.0), 400.0)
    assert proj.velocity_at(4.0) == pytest.approx(1.0)
    assert proj.velocity_at(5.0) == pytest.approx(0.0, abs=1e-9)
    assert np.all(proj.v_mps >= 0.0)
    assert proj.x_m[-1] == pytest.approx(12.5, abs=1e-6)
    assert proj.time_at(100.0)[0] == np.inf


def test_proxy_rejects_empty_span():
    with pytest.raises(mpc.MpcError):
        mpc.project_proxy((0.0, 0.0, 5.0, 0.0), Route(100.0), 0.0)


def test_predicted_lead_waits_at_red():
    route = Route(1000.0, ((0.0, 17.0),), 10.0, (TrafficLight(200.0, 60.0, 20.0, 0.0),))
    lead = constant_lead(route, 10.0)
    xs = np.array([100.0, 250.0])
    times = mpc.predict_lead_times(lead, 10.0, 0.0, route, xs, mpc.MpcConfig())
    assert times[0] == pytest.approx(10.0)
    # at the line by t=20 (red), held until 60, then resumes from rest
    assert times[1] > 60.0


# -- detection and config ----------------------------------------------------


@pytest.mark.parametrize("gap, seen", [(150.0, True), (250.0, False), (200.0, True), (0.0, True), (-5.0, False)])
def test_detect_lead(gap, seen):
    assert mpc.detect_lead(100.0, 100.0 + gap, mpc.MpcConfig()) is seen


def test_config_invariants():
    assert mpc.MpcConfig().n_horizon == 20
    with pytest.raises(mpc.MpcError):
        mpc.MpcConfig(horizon_m=205.0)
    with pytest.raises(mpc.MpcError):
        mpc.MpcConfig(t_gap_s=-1.0)
    with pytest.raises(mpc.MpcError):
        mpc.MpcConfig(terminal_cost_source="oracle")


def test_controller_needs_its_sources():
    route = Route(500.0)
    with pytest.raises(mpc.MpcError):
        mpc.Controller(route, VehicleParams(), mpc.MpcConfig(terminal_cost_source="exact_dp"))
    with pytest.raises(mpc.MpcError):
        mpc.Controller(route, VehicleParams(), mpc.MpcConfig(terminal_cost_source="ensemble_nn"), ag_net=_zero_net())
    with pytest.raises(T.NetError):
        mpc.Controller(route, VehicleParams(), mpc.MpcConfig(gamma=0.5), ag_net=_zero_net(gamma=0.9))


# -- single horizon ----------------------------------------------------------


def test_time_greedy_horizon_takes_max_acceleration():
    ctrl = mpc.Controller(Route(1000.0, ((0.0, 17.0),)), VehicleParams(), mpc.MpcConfig(gamma=0.0),
                          ag_net=_zero_net(gamma=0.0))
    ic, (_, cT, n) = ctrl.solve_horizon(0, EgoState(5.0, 0.25, 0.0))
    assert ctrl.controls[ic][0] == ctrl.a_max
    assert cT == 0.0 and n == 20


def test_red_light_ahead_decelerates():
    # green only on [70, 80) s, far beyond any arrival time
    route = Route(1000.0, ((0.0, 17.0),), 10.0, (TrafficLight(100.0, 100.0, 10.0, 70.0),))
    ctrl = mpc.Controller(route, VehicleParams(), mpc.MpcConfig(), ag_net=_zero_net())
    ic, _ = ctrl.solve_horizon(0, EgoState(10.0, 0.25, 0.0))
    assert ctrl.controls[ic][0] < 0.0


# -- closed loop -------------------------------------------------------------


@pytest.fixture(scope="module")
def exact_run(small_solution):
    scn, prob, vf, _ = small_solution
    ctrl = mpc.Controller(scn.route, prob.params, mpc.MpcConfig(terminal_cost_source="exact_dp"), grid=SMALL_GRID,
                          full_problem=prob, full_vf=vf)
    return mpc.run_closed_loop(ctrl, prob.x0)


def test_exact_terminal_cost_tracks_dp(small_solution, exact_run):
    _, prob, vf, pol = small_solution
    dp_cost = dp.extract_trajectory(pol, vf, prob).total_cost
    assert dp_cost * (1 - 1e-9) <= exact_run.total_cost <= 1.01 * dp_cost
    assert exact_run.light_violations == 0 and exact_run.fallbacks == 0


def test_metrics_recompute_from_trajectory(exact_run):
    tr = exact_run.trajectory
    dt = np.diff(tr.t_s)
    assert exact_run.efc_g == pytest.approx(float(np.sum(tr.eq_fuel_rate_gps * dt)), rel=1e-9)
    assert exact_run.travel_time_s == pytest.approx(float(np.sum(dt)), rel=1e-9)
    assert exact_run.metrics()["final_soc_pct"] == pytest.approx(100.0 * tr.soc[-1], rel=1e-9)


def test_closed_loop_is_deterministic(nets):
    ag, aw = nets
    route = small_scenario(True).route
    x0 = EgoState(0.0, 0.25, 0.0)
    runs = [mpc.run_closed_loop(mpc.Controller(route, VehicleParams(), mpc.MpcConfig(), SMALL_GRID, ag_net=ag), x0)
            for _ in range(2)]
    a, b = (r.trajectory for r in runs)
    for name in ("t_s", "v_mps", "soc", "accel", "eq_fuel_g"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_ensemble_equals_ag_without_traffic(nets):
    ag, aw = nets
    route = small_scenario(False).route
    x0 = EgoState(0.0, 0.25, 0.0)
    res = {}
    for src in ("ag_nn", "ensemble_nn"):
        ctrl = mpc.Controller(route, VehicleParams(), mpc.MpcConfig(terminal_cost_source=src), SMALL_GRID,
                              ag_net=ag, aw_net=aw)
        res[src] = mpc.run_closed_loop(ctrl, x0)
    a, b = res["ag_nn"].trajectory, res["ensemble_nn"].trajectory
    for name in ("t_s", "v_mps", "soc", "accel", "engine_on", "eq_fuel_g"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert set(res["ensemble_nn"].branches) == {"ag"}


def test_aw_branch_recorded_at_detected_steps(nets):
    ag, aw = nets
    route = Route(600.0, ((0.0, 12.0),), 10.0, (TrafficLight(300.0, 40.0, 20.0, 5.0),))
    lead = constant_lead(route, 6.0, 0.0)
    ctrl = mpc.Controller(route, VehicleParams(), mpc.MpcConfig(terminal_cost_source="ensemble_nn"), SMALL_GRID,
                          ag_net=ag, aw_net=aw)
    res = mpc.run_closed_loop(ctrl, EgoState(0.0, 0.25, 15.0), lead)
    expected = ["aw" if d.lead_detected else "ag" for d in res.diagnostics]
    assert res.branches == expected
    assert "aw" in expected and "ag" in expected
    for d in res.diagnostics:
        if d.lead_detected:
            assert 0.0 <= d.lead_gap_m <= 200.0
    assert res.gap_violations == 0
    assert mpc.count_gap_violations(res.trajectory, lead) == 0
    assert res.light_violations == 0


def test_trajectory_export(tmp_path, exact_run):
    path = tmp_path / "traj.csv"
    exact_run.save_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == mpc.TRAJ_HEADER
    assert len(lines) == len(exact_run.trajectory.x_m) + 1
    exact_run.save_diagnostics(tmp_path / "diag.jsonl")
    assert len((tmp_path / "diag.jsonl").read_text().splitlines()) == len(exact_run.diagnostics)
