"""Receding-horizon controller and closed-loop simulation.

Each 10 m step solves a short backward DP over the next ``horizon_m`` with a
pluggable terminal cost, applies the first control to the plant (the same
compiled transition used by the solver) and moves on.  The controller only
sees the lead vehicle through its observed history and a constant
acceleration projection; the exact-value source instead gets the full-route
knowledge the wait-and-see DP had, which makes it a consistency check.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import dp
from . import kernels as K
from . import terminal as T
from .vehicle import EgoState, VehicleParams
from .world import LeadTrajectory, Route, effective_speed_limit, lead_time_at, lead_times_at_nodes

SOURCES = ("exact_dp", "ag_nn", "ensemble_nn")


class MpcError(RuntimeError):
    pass


class PlantViolationError(MpcError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class MpcConfig:
    ds_m: float = 10.0
    horizon_m: float = 200.0
    gamma: float = 0.9
    terminal_cost_source: str = "ag_nn"
    t_gap_s: float = 2.0
    proxy_projection_m: float = 200.0
    sensing_range_m: float | None = None
    soc_nodes: int = 5
    resume_accel_mps2: float = 1.0
    accel_clamp_mps2: float = 3.0

    def __post_init__(self):
        if self.ds_m <= 0 or self.horizon_m <= 0:
            raise MpcError("ds and horizon must be positive")
        ratio = self.horizon_m / self.ds_m
        if abs(ratio - round(ratio)) > 1e-9:
            raise MpcError("horizon must be a multiple of ds")
        if self.t_gap_s < 0:
            raise MpcError("time gap must be nonnegative")
        if self.terminal_cost_source not in SOURCES:
            raise MpcError(f"unknown terminal cost source {self.terminal_cost_source!r}")
        if self.soc_nodes < 2:
            raise MpcError("need at least two SoC nodes in the horizon")

    @property
    def n_horizon(self) -> int:
        return int(round(self.horizon_m / self.ds_m))

    @property
    def sensing_m(self) -> float:
        return self.horizon_m if self.sensing_range_m is None else self.sensing_range_m


@dataclass
class ProxyProjection:
    anchor: tuple  # (t, x, v, a_est)
    t_s: np.ndarray
    x_m: np.ndarray
    v_mps: np.ndarray
    jam_interaction: bool

    def position_at(self, t):
        return np.interp(t, self.t_s, self.x_m)

    def velocity_at(self, t):
        return np.interp(t, self.t_s, self.v_mps)

    def time_at(self, x) -> np.ndarray:
        """First time the projection reaches each position (inf if never)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.full(x.shape, np.inf)
        reach = x <= self.x_m[-1]
        idx = np.searchsorted(self.x_m, x[reach], side="left")
        i1 = np.clip(idx, 1, len(self.x_m) - 1)
        x0, x1 = self.x_m[i1 - 1], self.x_m[i1]
        t0, t1 = self.t_s[i1 - 1], self.t_s[i1]
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(x1 > x0, (x[reach] - x0) / (x1 - x0), 1.0)
        tt = t0 + np.clip(w, 0.0, 1.0) * (t1 - t0)
        out[reach] = np.where(idx == 0, self.t_s[0], tt)
        return out


def _integrate(route: Route, t0, x0, v0, a, span_m, dt, t_max, lights=False, resume=0.0):
    ts, xs, vs = [t0], [x0], [v0]
    t, x, v = t0, x0, v0
    jam_hit = False
    x_end = x0 + span_m
    hold_until = -np.inf
    while x < x_end and t < t0 + t_max:
        if t < hold_until:
            t = min(t + dt, hold_until)
            ts.append(t)
            xs.append(x)
            vs.append(0.0)
            continue
        v_new = v + a * dt
        lim = effective_speed_limit(route, min(x, route.length_m - 1e-9), t) if x < route.length_m else route.base_limit(route.length_m)
        if lim < route.base_limit(min(x, route.length_m)):
            jam_hit = True
        v_new = min(max(v_new, 0.0), lim)
        x_new = x + 0.5 * (v + v_new) * dt
        t_new = t + dt
        if lights:
            for lt in route.lights:
                if x < lt.position_m <= x_new:
                    tau = (t_new - lt.offset_s) % lt.cycle_s
                    if tau >= lt.green_s:
                        # held at the stop line until the next green
                        x_new = lt.position_m
                        v_new = 0.0
                        hold_until = t_new + (lt.cycle_s - tau)
                    break
        if v_new == 0.0 and a <= 0.0 and resume > 0.0:
            a = resume
        t, x, v = t_new, x_new, v_new
        ts.append(t)
        xs.append(x)
        vs.append(v)
        if v == 0.0 and a <= 0.0 and not resume:
            # held indefinitely
            break
    return np.array(ts), np.array(xs), np.array(vs), jam_hit


def project_proxy(lead_obs, route: Route, span_m: float, dt: float = 0.1, t_max: float = 300.0) -> ProxyProjection:
    """Constant-acceleration projection of the observed lead.

    Speed is clamped pointwise to [0, effective speed limit]; a stopped
    projection holds its position.
    """
    if span_m <= 0:
        raise MpcError("projection span must be positive")
    t0, x0, v0, a = (float(c) for c in lead_obs)
    ts, xs, vs, jam = _integrate(route, t0, x0, v0, a, span_m, dt, t_max)
    return ProxyProjection((t0, x0, v0, a), ts, xs, vs, jam)


def predict_lead_times(lead: LeadTrajectory, t_now: float, a_est: float, route: Route, xs: np.ndarray,
                       cfg: MpcConfig, dt: float = 0.1) -> np.ndarray:
    """Times at which the lead is expected to pass each position in ``xs``.

    Positions the lead has already passed use its observed history.  Ahead
    of it the projection respects red lights (it stops at the line and waits
    for green) and resumes at ``cfg.resume_accel_mps2`` after any stop.
    """
    x_now = float(lead.position_at(t_now))
    v_now = float(lead.velocity_at(t_now))
    out = np.full(len(xs), np.nan)
    past = xs <= x_now
    for i in np.flatnonzero(past):
        out[i] = lead_time_at(lead, float(xs[i]))
    if np.any(~past):
        span = max(float(xs[-1]) - x_now, cfg.ds_m)
        a0 = a_est if v_now > 0.0 or a_est > 0.0 else cfg.resume_accel_mps2
        ts, xp, vp, _ = _integrate(route, t_now, x_now, v_now, a0, span + cfg.ds_m, dt, 600.0, lights=True,
                                   resume=cfg.resume_accel_mps2)
        proj = ProxyProjection((t_now, x_now, v_now, a0), ts, xp, vp, False)
        out[~past] = proj.time_at(xs[~past])
    return out


def detect_lead(ego_pos: float, lead_pos: float, cfg: MpcConfig) -> bool:
    gap = lead_pos - ego_pos
    return bool(0.0 <= gap <= cfg.sensing_m)


@dataclass
class HorizonDiagnostics:
    step: int
    horizon_cost: float
    terminal_value: float
    branch: str
    fallback: bool
    lead_detected: bool
    lead_gap_m: float
    n_layers: int

    def as_dict(self) -> dict:
        return {"step": self.step, "horizon_cost": self.horizon_cost, "terminal_value": self.terminal_value,
                "branch": self.branch, "fallback": self.fallback, "lead_detected": self.lead_detected,
                "lead_gap_m": self.lead_gap_m, "n_layers": self.n_layers}


@dataclass
class Controller:
    """Everything a closed-loop run needs besides the plant state."""

    route: Route
    params: VehicleParams
    cfg: MpcConfig
    grid: dp.GridSpec = field(default_factory=dp.GridSpec)
    terminal_cost: dp.TerminalCost = field(default_factory=dp.TerminalCost)
    full_problem: dp.DpProblem | None = None
    full_vf: dp.ValueFunction | None = None
    ag_net: T.TerminalCostNet | None = None
    aw_net: T.TerminalCostNet | None = None

    def __post_init__(self):
        self.p = self.params.as_array()
        self.controls = self.grid.controls()
        self.a_max = min(max(self.grid.accels), self.params.accel_max)
        src = self.cfg.terminal_cost_source
        if src == "exact_dp":
            if self.full_problem is None or self.full_vf is None:
                raise MpcError("exact_dp source needs the full-route problem and value function")
            self.plan_route = self.route
            self.jams = self.full_problem.jams
        else:
            if self.ag_net is None or (src == "ensemble_nn" and self.aw_net is None):
                raise MpcError(f"{src} source needs its terminal-cost nets")
            for net in (self.ag_net, self.aw_net):
                if net is not None and net.gamma is not None and net.gamma != self.cfg.gamma:
                    raise T.NetError(f"net trained for gamma={net.gamma}, controller uses {self.cfg.gamma}")
            if src == "ensemble_nn":
                T.check_pair(self.ag_net, self.aw_net)
            self.plan_route = self.route.without_jams()
            self.jams = np.zeros((0, 5))
        self.base_table = dp.route_table(self.plan_route)

    # -- horizon construction -------------------------------------------------

    def _local_problem(self, s: int, state: EgoState, lead_t) -> dp.DpProblem:
        H = min(self.cfg.n_horizon, self.route.n_steps - s)
        table = self.base_table[s:s + H + 1].copy()
        if lead_t is not None:
            table[:, K.C_LEAD] = lead_t
        taxes = dp.time_windows(self.route, self.grid, state.v_mps, state.time_s, self.a_max,
                                x_start=s * self.route.ds_m, n_steps=H)
        dsoc = self.grid.dsoc
        k0 = int(round(state.soc_frac / dsoc)) - self.cfg.soc_nodes // 2
        sax = np.array([0.0, dsoc, float(k0), float(self.cfg.soc_nodes)])
        if self.cfg.terminal_cost_source == "exact_dp":
            # the full problem's own time grid; the SoC window is a sub-range of its SoC grid
            taxes[1:] = self.full_problem.taxes[s + 1:s + H + 1]
            full = self.full_problem.sax
            k0 = min(max(k0, int(full[2])), int(full[2] + full[3]) - self.cfg.soc_nodes)
            sax = np.array([full[0], full[1], float(k0), float(min(self.cfg.soc_nodes, int(full[3])))])
        elif lead_t is not None:
            finite = np.where(np.isfinite(lead_t), lead_t, np.nan)
            taxes = dp.anchor_to_lead(taxes, finite, self.cfg.t_gap_s, self.grid.time_slack_s)
        vax = dp.make_axis(0.0, self.route.v_max_global, self.grid.dv)
        return dp.DpProblem(self.params, self.p, self.controls, self.route.ds_m, self.cfg.gamma, vax, sax, taxes,
                            table, self.jams, self.route.min_speed_mps, self.cfg.t_gap_s, state, self.plan_route)

    def _terminal_layer(self, prob: dp.DpProblem, s_end: int, branch: str, proxy) -> np.ndarray:
        H = prob.n_steps
        if s_end == self.route.n_steps:
            return dp.terminal_layer(prob, self.terminal_cost, H)
        v = dp._axis_nodes(prob.vax)
        soc = dp._axis_nodes(prob.sax)
        t = dp._axis_nodes(prob.taxes[H])
        V, S, Tm = (a.ravel() for a in np.meshgrid(v, soc, t, indexing="ij"))
        if branch == "exact":
            vals = T.value_at_nodes(self.full_vf, s_end, V, S, Tm)
        else:
            x = s_end * self.route.ds_m
            if branch == "aw":
                xl = proxy.position_at(Tm)
                d = np.maximum(xl - x, 0.0)
                X = T.features_aw_batch(self.plan_route, x, V, S, Tm, d, proxy.velocity_at(Tm))
                vals = self.aw_net.forward(X)
            else:
                X = T.features_ag_batch(self.plan_route, x, V, S, Tm)
                vals = self.ag_net.forward(X)
        J = np.asarray(vals, dtype=float).reshape(len(v), len(soc), len(t))
        J[v > prob.table[H, K.C_VBASE] + 1e-9] = np.inf
        return J

    def solve_horizon(self, s: int, state: EgoState, lead_t=None, branch: str = "ag", proxy=None):
        """Return ``(control index or -1, diagnostics tuple)`` for one MPC step."""
        prob = self._local_problem(s, state, lead_t)
        H = prob.n_steps
        J = [None] * (H + 1)
        J[H] = self._terminal_layer(prob, s + H, branch, proxy)
        for k in range(H - 1, 0, -1):
            J[k], _ = K.sweep_layer(prob.p, prob.controls, prob.ds, prob.gamma, prob.vax, prob.sax, prob.taxes[k],
                                    prob.table[k, K.C_VBASE], prob.table[k + 1], prob.jams, prob.vmin, prob.gap,
                                    prob.taxes[k + 1], J[k + 1], K.MODE_LINEAR)
        try:
            path = dp.plan_path(prob, J, K.MODE_LINEAR, state, 0, H)
        except dp.RolloutError:
            return -1, (np.inf, np.nan, H)
        traj = dp.simulate(prob, path, state, lambda v, so, t: np.zeros(np.shape(v)))
        cT = float(K.interp3(J[H], prob.vax, prob.sax, prob.taxes[H], traj.v_mps[-1], traj.soc[-1], traj.t_s[-1],
                             K.MODE_LINEAR))
        return path[0], (float(np.sum(traj.stage_cost)) + cT, cT, H)


@dataclass
class ClosedLoopResult:
    trajectory: dp.Trajectory
    diagnostics: list
    source: str
    gamma: float
    gap_violations: int
    light_violations: int
    fallbacks: int
    cT_values: np.ndarray
    branches: list
    efc_g: float = 0.0
    travel_time_s: float = 0.0
    final_soc: float = 0.0
    total_cost: float = 0.0

    def __post_init__(self):
        self.efc_g = self.trajectory.efc_g
        self.travel_time_s = self.trajectory.travel_time_s
        self.final_soc = self.trajectory.final_soc
        self.total_cost = self.trajectory.total_cost

    def metrics(self) -> dict:
        return {"efc_g": self.efc_g, "travel_time_s": self.travel_time_s, "final_soc_pct": 100.0 * self.final_soc,
                "total_cost": self.total_cost, "gap_violations": self.gap_violations,
                "light_violations": self.light_violations, "fallbacks": self.fallbacks}

    def save_csv(self, path) -> None:
        write_trajectory_csv(path, self.trajectory, self.cT_values, self.branches)

    def save_diagnostics(self, path) -> None:
        with open(path, "w") as fh:
            for d in self.diagnostics:
                fh.write(json.dumps(d.as_dict(), sort_keys=True) + "\n")


TRAJ_HEADER = ["s", "x_m", "t_s", "v_mps", "soc", "accel", "engine_on", "F_tr_N", "P_batt_W", "mf_gps", "mfeq_gps",
               "cT_value", "branch"]


def write_trajectory_csv(path, traj: dp.Trajectory, cT=None, branches=None) -> None:
    n = len(traj.accel)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJ_HEADER)
        for k in range(n + 1):
            step = k < n
            row = [k, repr(float(traj.x_m[k])), repr(float(traj.t_s[k])), repr(float(traj.v_mps[k])),
                   repr(float(traj.soc[k]))]
            if step:
                row += [repr(float(traj.accel[k])), int(traj.engine_on[k]), repr(float(traj.force_N[k])),
                        repr(float(traj.batt_power_W[k])), repr(float(traj.fuel_rate_gps[k])),
                        repr(float(traj.eq_fuel_rate_gps[k]))]
                row += [repr(float(cT[k])) if cT is not None else "", branches[k] if branches is not None else "dp"]
            else:
                row += [""] * 8
            w.writerow(row)


def _fallback(ctrl: Controller, plant_row, state: EgoState, jams) -> int:
    """Hardest braking the plant accepts, or the gentlest start from rest."""
    order = np.argsort(ctrl.controls[:, 0], kind="stable")
    if state.v_mps <= 0.0:
        order = [i for i in order if ctrl.controls[i, 0] > 0]
    for ic in order:
        a, e = ctrl.controls[ic]
        tr = K.transition(ctrl.p, state.v_mps, state.soc_frac, state.time_s, a, e > 0.5, ctrl.route.ds_m,
                          ctrl.cfg.gamma, plant_row, jams, ctrl.route.min_speed_mps, ctrl.cfg.t_gap_s)
        if tr[0]:
            return int(ic)
    return -1


def run_closed_loop(ctrl: Controller, x0: EgoState, lead: LeadTrajectory | None = None) -> ClosedLoopResult:
    """Simulate the controller over the whole route.

    The plant enforces the vehicle limits, the base speed limits and the
    signals; lead-gap shortfalls against the true lead are counted, not
    prevented, so they show up as violations.
    """
    route = ctrl.route
    cfg = ctrl.cfg
    N = route.n_steps
    src = cfg.terminal_cost_source
    plant_table = dp.route_table(route.without_jams())
    no_jams = np.zeros((0, 5))
    true_lead_t = None
    if lead is not None:
        true_lead_t = lead_times_at_nodes(lead, np.arange(N + 1) * route.ds_m)
    full_lead_t = ctrl.full_problem.table[:, K.C_LEAD] if src == "exact_dp" else None

    path = []
    diags = []
    cTs = []
    branches = []
    gap_viol = 0
    fallbacks = 0
    state = x0
    prev_obs = None
    for s in range(N):
        detected = False
        gap_m = float("nan")
        lead_obs = None
        if lead is not None and state.time_s <= lead.t_s[-1]:
            xl = float(lead.position_at(state.time_s))
            gap_m = xl - s * route.ds_m
            detected = detect_lead(s * route.ds_m, xl, cfg) and xl < route.length_m
            if detected:
                vl = float(lead.velocity_at(state.time_s))
                a_est = 0.0
                if prev_obs is not None and state.time_s > prev_obs[0]:
                    a_est = (vl - prev_obs[1]) / (state.time_s - prev_obs[0])
                a_est = float(np.clip(a_est, -cfg.accel_clamp_mps2, cfg.accel_clamp_mps2))
                lead_obs = (state.time_s, xl, vl, a_est)
                prev_obs = (state.time_s, vl)
            else:
                prev_obs = None
        H = min(cfg.n_horizon, N - s)
        proxy = None
        if src == "exact_dp":
            branch = "exact"
            lead_t = None if full_lead_t is None else full_lead_t[s:s + H + 1]
            if lead_t is not None and not np.any(np.isfinite(lead_t)):
                lead_t = None
        else:
            branch = "aw" if (src == "ensemble_nn" and detected) else "ag"
            lead_t = None
            if detected:
                xs = (s + np.arange(H + 1)) * route.ds_m
                lead_t = predict_lead_times(lead, state.time_s, lead_obs[3], route, xs, cfg)
                if branch == "aw":
                    proxy = project_proxy(lead_obs, route, cfg.horizon_m + cfg.proxy_projection_m)
        ic, (hcost, cT, nl) = ctrl.solve_horizon(s, state, lead_t, branch, proxy)
        fb = ic < 0
        if fb:
            ic = _fallback(ctrl, plant_table[s + 1], state, no_jams)
            fallbacks += 1
            if ic < 0:
                raise PlantViolationError(s, "no control keeps the plant within its limits")
        a, e = ctrl.controls[ic]
        tr = K.transition(ctrl.p, state.v_mps, state.soc_frac, state.time_s, a, e > 0.5, route.ds_m, cfg.gamma,
                          plant_table[s + 1], no_jams, route.min_speed_mps, cfg.t_gap_s)
        if not tr[0]:
            raise PlantViolationError(s, f"control {ic} rejected by the plant")
        if true_lead_t is not None and np.isfinite(true_lead_t[s + 1]) and tr[5] < true_lead_t[s + 1] + cfg.t_gap_s - 1e-9:
            gap_viol += 1
        path.append(ic)
        diags.append(HorizonDiagnostics(s, hcost, cT, branch, fb, detected, gap_m, nl))
        cTs.append(cT)
        branches.append(branch)
        state = EgoState(float(tr[1]), float(min(max(tr[2], 0.0), 1.0)), float(tr[3]))

    plant = dp.DpProblem(ctrl.params, ctrl.p, ctrl.controls, route.ds_m, cfg.gamma, np.zeros(4), np.zeros(4),
                         np.zeros((N + 1, 4)), plant_table, no_jams, route.min_speed_mps, cfg.t_gap_s, x0, route)
    traj = dp.simulate(plant, path, x0, ctrl.terminal_cost) if N else dp.empty_trajectory(x0)
    light_viol = count_light_violations(traj, route)
    return ClosedLoopResult(traj, diags, src, cfg.gamma, gap_viol, light_viol, fallbacks, np.array(cTs), branches)


def count_light_violations(traj: dp.Trajectory, route: Route) -> int:
    """Light crossings at positive speed outside the green phase."""
    bad = 0
    for s, t_arr, t_dep, v in traj.light_arrivals(route):
        lt = route.light_at_node(s)
        green = ((t_arr - lt.offset_s) % lt.cycle_s) < lt.green_s
        dep_green = ((t_dep - lt.offset_s) % lt.cycle_s) < lt.green_s or t_dep > t_arr
        if (v > 0 and not green) or not dep_green:
            bad += 1
    return bad


def count_gap_violations(traj: dp.Trajectory, lead: LeadTrajectory | None, gap: float = 2.0) -> int:
    if lead is None:
        return 0
    lt = lead_times_at_nodes(lead, traj.x_m[1:])
    ok = ~np.isfinite(lt) | (traj.t_arrive_s >= lt + gap - 1e-9)
    return int(np.sum(~ok))
