"""Backward dynamic programming over a (velocity, SoC, time) grid.

A :class:`DpProblem` flattens a scenario into the arrays consumed by the
compiled kernels: one row of route data per distance node, a jam table, the
velocity/SoC axes shared by all layers and a per-layer time axis bounded by
a free-flow envelope from below and a slow-traffic envelope from above.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels as K
from .vehicle import ControlInput, EgoState, PowerFlows, VehicleParams
from .world import (
    LeadTrajectory,
    Route,
    Scenario,
    constant_lead,
    jam_speed,
    lead_times_at_nodes,
)

VF_MAGIC = b"ECODRIVE-VF 1\n"


class DpError(RuntimeError):
    pass


class NoSolutionError(DpError):
    pass


class OutOfHullError(DpError):
    pass


class AllInfeasibleError(DpError):
    pass


class BudgetExceededError(DpError):
    pass


class RolloutError(DpError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class GridSpec:
    dv: float = 1.0
    soc_min: float = 0.22
    soc_max: float = 0.27
    dsoc: float = 0.005
    dt: float = 1.0
    accels: tuple = (-3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0)
    engine_states: tuple = (0, 1)
    time_slack_s: float = 20.0
    slow_speed_mps: float = 7.0
    gap_s: float = 2.0

    def controls(self) -> np.ndarray:
        return np.array([[a, e] for a in self.accels for e in self.engine_states], dtype=float)


@dataclass(frozen=True)
class TerminalCost:
    """Quadratic penalty on residual speed and on SoC below a floor."""

    w_v: float = 0.0115
    soc_floor: float = 0.24
    w_soc: float = 1.0e5

    def __call__(self, v, soc, t):
        v = np.asarray(v, dtype=float)
        short = np.maximum(0.0, self.soc_floor - np.asarray(soc, dtype=float))
        val = self.w_v * v * v + self.w_soc * short * short
        return np.broadcast_to(val, np.broadcast(val, np.asarray(t)).shape).copy()


@dataclass
class DpProblem:
    """Discretized instance; every array is in the layout the kernels expect."""

    params: VehicleParams
    p: np.ndarray
    controls: np.ndarray
    ds: float
    gamma: float
    vax: np.ndarray
    sax: np.ndarray
    taxes: np.ndarray  # (N+1, 4)
    table: np.ndarray  # (N+1, N_COLS)
    jams: np.ndarray  # (m, 5): x0, x1, t0, t1, v_jam
    vmin: float
    gap: float
    x0: EgoState
    route: Route | None = None
    tag: str = ""

    @property
    def n_steps(self) -> int:
        return self.table.shape[0] - 1

    def time_axis(self, s: int) -> np.ndarray:
        return _axis_nodes(self.taxes[s])

    def with_gamma(self, gamma: float) -> "DpProblem":
        return DpProblem(self.params, self.p, self.controls, self.ds, gamma, self.vax, self.sax, self.taxes,
                         self.table, self.jams, self.vmin, self.gap, self.x0, self.route, self.tag)


@dataclass
class StateGrid:
    vax: np.ndarray
    sax: np.ndarray
    taxes: np.ndarray
    vbase: np.ndarray
    ds_m: float

    @property
    def step_count(self) -> int:
        return self.taxes.shape[0] - 1

    def velocity_axis(self, s: int) -> np.ndarray:
        """Velocity nodes admissible at step ``s`` (at or below the base limit)."""
        v = _axis_nodes(self.vax)
        return v[v <= self.vbase[s] + 1e-9]

    @property
    def soc_axis(self) -> np.ndarray:
        return _axis_nodes(self.sax)

    def time_axis(self, s: int) -> np.ndarray:
        return _axis_nodes(self.taxes[s])


@dataclass
class ValueFunction:
    J: list
    vax: np.ndarray
    sax: np.ndarray
    taxes: np.ndarray
    gamma: float
    scenario_hash: str = ""
    mode: int = K.MODE_LINEAR

    @property
    def n_steps(self) -> int:
        return len(self.J) - 1


@dataclass
class OptimalPolicy:
    index: list
    controls: np.ndarray

    def control(self, s: int, iv: int, js: int, kt: int):
        ic = int(self.index[s][iv, js, kt])
        if ic < 0:
            return None
        a, e = self.controls[ic]
        return ControlInput(float(a), int(e))


@dataclass
class Trajectory:
    """Per-node samples; arrays have N+1 entries, per-step arrays N entries."""

    x_m: np.ndarray
    t_s: np.ndarray
    v_mps: np.ndarray
    soc: np.ndarray
    accel: np.ndarray
    engine_on: np.ndarray
    force_N: np.ndarray
    batt_power_W: np.ndarray
    fuel_rate_gps: np.ndarray
    eq_fuel_rate_gps: np.ndarray
    stage_cost: np.ndarray
    eq_fuel_g: np.ndarray
    t_arrive_s: np.ndarray
    terminal_cost: float = 0.0

    @property
    def efc_g(self) -> float:
        return float(np.sum(self.eq_fuel_g))

    @property
    def travel_time_s(self) -> float:
        return float(self.t_s[-1] - self.t_s[0])

    @property
    def final_soc(self) -> float:
        return float(self.soc[-1])

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.stage_cost)) + self.terminal_cost

    def states(self) -> list:
        return [EgoState(float(v), float(s), float(t)) for v, s, t in zip(self.v_mps, self.soc, self.t_s)]

    def controls(self) -> list:
        return [ControlInput(float(a), int(e)) for a, e in zip(self.accel, self.engine_on)]

    def flows(self, params: VehicleParams) -> list:
        out = []
        for k in range(len(self.accel)):
            vbar = 0.5 * (self.v_mps[k] + self.v_mps[k + 1])
            f = self.force_N[k]
            p_tr = f * vbar
            out.append(PowerFlows(float(f), float(params.a0 + params.a1 * self.v_mps[k] + params.a2 * self.v_mps[k] ** 2),
                                  float(p_tr), float(self.batt_power_W[k]), float("nan"),
                                  float(self.fuel_rate_gps[k]), float(self.eq_fuel_rate_gps[k])))
        return out

    def light_arrivals(self, route: Route) -> list:
        """(node, arrival time, departure time, arrival speed) at each light node."""
        out = []
        for lt in route.lights:
            s = int(round(lt.position_m / route.ds_m))
            if 0 < s < len(self.t_s):
                out.append((s, float(self.t_arrive_s[s - 1]), float(self.t_s[s]), float(self.v_mps[s])))
        return out


# ---------------------------------------------------------------------------
# problem construction


def _axis_nodes(ax) -> np.ndarray:
    return ax[0] + (ax[2] + np.arange(int(ax[3]))) * ax[1]


def make_axis(lo: float, hi: float, step: float, origin: float = 0.0) -> np.ndarray:
    """Axis aligned to ``origin + k*step`` covering [lo, hi] with at least two nodes."""
    k0 = math.floor((lo - origin) / step + 1e-9)
    k1 = math.ceil((hi - origin) / step - 1e-9)
    return np.array([origin, step, float(k0), float(max(2, k1 - k0 + 1))])


def jam_table(route: Route) -> np.ndarray:
    out = np.zeros((len(route.jams), 5))
    for j, jam in enumerate(route.jams):
        out[j] = (jam.x_start_m, jam.x_end_m, jam.t_start_s, jam.t_end_s, jam_speed(jam))
    return out


def route_table(route: Route, lead_times=None) -> np.ndarray:
    n = route.n_steps
    tab = np.zeros((n + 1, K.N_COLS))
    xs = np.arange(n + 1) * route.ds_m
    tab[:, K.C_X] = xs
    tab[:, K.C_VBASE] = [route.base_limit(x) for x in xs]
    for lt in route.lights:
        s = int(round(lt.position_m / route.ds_m))
        tab[s, K.C_LIGHT] = 1.0
        tab[s, K.C_CYCLE] = lt.cycle_s
        tab[s, K.C_GREEN] = lt.green_s
        tab[s, K.C_OFFSET] = lt.offset_s
    tab[:, K.C_LEAD] = np.nan if lead_times is None else lead_times
    return tab


def free_flow_times(vbase: np.ndarray, ds: float, v0: float, t0: float, a_max: float) -> np.ndarray:
    """Earliest possible time at each node: max acceleration capped by base limits."""
    n = len(vbase) - 1
    out = np.empty(n + 1)
    out[0] = t0
    v = v0
    for k in range(n):
        v1 = min(math.sqrt(v * v + 2.0 * ds * a_max), vbase[k + 1])
        out[k + 1] = out[k] + 2.0 * ds / (v + v1)
        v = v1
    return out


def time_windows(route: Route, grid: GridSpec, v0: float, t0: float, a_max: float,
                 x_start: float = 0.0, n_steps: int | None = None) -> np.ndarray:
    """Per-node time axes from ``x_start`` on.

    The lower edge is the free-flow envelope; the upper edge grants a fixed
    slack, a slow cruise over the distance covered and one full red phase
    per light passed.
    """
    s0 = int(round(x_start / route.ds_m))
    n = route.n_steps - s0 if n_steps is None else n_steps
    xs = x_start + np.arange(n + 1) * route.ds_m
    vbase = np.array([route.base_limit(x) for x in xs])
    lo = free_flow_times(vbase, route.ds_m, v0, t0, a_max)
    taxes = np.empty((n + 1, 4))
    for k, x in enumerate(xs):
        reds = sum(lt.red_s for lt in route.lights if x_start < lt.position_m <= x)
        hi = t0 + grid.time_slack_s + (x - x_start) / grid.slow_speed_mps + reds
        hi = max(hi, lo[k] + grid.time_slack_s)
        taxes[k] = make_axis(lo[k], hi, grid.dt)
    return taxes


def anchor_to_lead(taxes: np.ndarray, lead_t: np.ndarray, gap: float, slack: float) -> np.ndarray:
    """Re-origin each layer's time axis on the earliest time the gap rule allows.

    The boundary of the lead-gap constraint then sits exactly on a node, so
    interpolation never mixes states on both sides of it.  Layer 0 keeps its
    axis so that the initial state stays a node.
    """
    out = taxes.copy()
    for k in range(1, len(out)):
        if not np.isfinite(lead_t[k]):
            continue
        step = out[k, 1]
        lo = out[k, 0] + out[k, 2] * step
        hi = out[k, 0] + (out[k, 2] + out[k, 3] - 1) * step
        edge = lead_t[k] + gap
        lo = max(lo, edge)
        out[k] = make_axis(lo, max(hi, lo + slack), step, edge)
    return out


def build_problem(scenario: Scenario, params: VehicleParams | None = None, grid: GridSpec | None = None,
                  gamma: float = 0.9, lead: LeadTrajectory | None = None, jam_aware: bool = True) -> DpProblem:
    params = params or VehicleParams()
    grid = grid or GridSpec()
    route = scenario.route if jam_aware else scenario.route.without_jams()
    a_max = min(max(grid.accels), params.accel_max)
    if a_max <= 0:
        a_max = params.accel_max  # still a valid lower time bound
    vmax = route.v_max_global
    vax = make_axis(0.0, vmax, grid.dv)
    sax = make_axis(grid.soc_min, grid.soc_max, grid.dsoc)
    taxes = time_windows(route, grid, scenario.v0_mps, scenario.t0_s, a_max)
    lead_t = None
    if lead is not None:
        lead_t = lead_times_at_nodes(lead, np.arange(route.n_steps + 1) * route.ds_m)
        taxes = anchor_to_lead(taxes, lead_t, grid.gap_s, grid.time_slack_s)
    x0 = EgoState(scenario.v0_mps, scenario.soc0, scenario.t0_s)
    return DpProblem(params, params.as_array(), grid.controls(), route.ds_m, gamma, vax, sax, taxes,
                     route_table(route, lead_t), jam_table(route), route.min_speed_mps, grid.gap_s, x0, route,
                     scenario_hash(scenario))


def scenario_hash(scenario: Scenario) -> str:
    blob = json.dumps(asdict(scenario), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def state_grid(problem: DpProblem) -> StateGrid:
    return StateGrid(problem.vax, problem.sax, problem.taxes, problem.table[:, K.C_VBASE].copy(), problem.ds)


# ---------------------------------------------------------------------------
# solver


def terminal_layer(problem: DpProblem, terminal_cost, s: int | None = None) -> np.ndarray:
    s = problem.n_steps if s is None else s
    v = _axis_nodes(problem.vax)
    soc = _axis_nodes(problem.sax)
    t = _axis_nodes(problem.taxes[s])
    V, S, T = np.meshgrid(v, soc, t, indexing="ij")
    J = np.asarray(terminal_cost(V, S, T), dtype=float).reshape(V.shape).copy()
    J[v > problem.table[s, K.C_VBASE] + 1e-9] = np.inf
    return J


def _mode(mode) -> int:
    if mode in (K.MODE_LINEAR, "linear"):
        return K.MODE_LINEAR
    if mode in (K.MODE_NEAREST, "nearest"):
        return K.MODE_NEAREST
    if mode in (K.MODE_STRICT, "strict"):
        return K.MODE_STRICT
    raise ValueError(f"unknown interpolation mode {mode!r}")


def backward_induction(problem: DpProblem, terminal_cost=None, mode="linear", require_x0: bool = True):
    """Solve the whole route; returns ``(ValueFunction, OptimalPolicy)``."""
    terminal_cost = terminal_cost or TerminalCost()
    m = _mode(mode)
    N = problem.n_steps
    J = [None] * (N + 1)
    pol = [None] * N
    J[N] = terminal_layer(problem, terminal_cost)
    for s in range(N - 1, -1, -1):
        J[s], pol[s] = K.sweep_layer(problem.p, problem.controls, problem.ds, problem.gamma, problem.vax,
                                     problem.sax, problem.taxes[s], problem.table[s, K.C_VBASE],
                                     problem.table[s + 1], problem.jams, problem.vmin, problem.gap,
                                     problem.taxes[s + 1], J[s + 1], m)
    vf = ValueFunction(J, problem.vax, problem.sax, problem.taxes, problem.gamma, problem.tag, m)
    if require_x0 and N > 0:
        x0 = problem.x0
        if not np.isfinite(K.interp3(J[0], problem.vax, problem.sax, problem.taxes[0],
                                     x0.v_mps, x0.soc_frac, x0.time_s, m)):
            raise NoSolutionError("initial state has no feasible continuation")
    return vf, OptimalPolicy(pol, problem.controls)


def bellman_residual(problem: DpProblem, vf: ValueFunction) -> float:
    """Largest disagreement between stored values and a node-by-node backup."""
    worst = 0.0
    for s in range(problem.n_steps):
        r = K.bellman_residual_layer(problem.p, problem.controls, problem.ds, problem.gamma, problem.vax,
                                     problem.sax, problem.taxes[s], problem.table[s, K.C_VBASE],
                                     problem.table[s + 1], problem.jams, problem.vmin, problem.gap,
                                     problem.taxes[s + 1], vf.J[s + 1], vf.mode, vf.J[s])
        worst = max(worst, r)
    return worst


def interpolate_value(vf: ValueFunction, s: int, state: EgoState) -> float:
    ax = ((vf.vax, state.v_mps), (vf.sax, state.soc_frac), (vf.taxes[s], state.time_s))
    for a, x in ax:
        if K._locate(a, float(x), K.MODE_NEAREST)[0] < 0:
            raise OutOfHullError(f"state {state} outside grid hull at step {s}")
    val = K.interp3(vf.J[s], vf.vax, vf.sax, vf.taxes[s], state.v_mps, state.soc_frac, state.time_s, vf.mode)
    if not np.isfinite(val):
        raise AllInfeasibleError(f"every neighbor of {state} at step {s} is infeasible")
    return float(val)


def admissible_controls(state: EgoState, s: int, problem: DpProblem) -> list:
    """Controls whose successor passes every constraint and lands inside the next layer's hull."""
    out = []
    row = problem.table[s + 1]
    for a, e in problem.controls:
        tr = K.transition(problem.p, state.v_mps, state.soc_frac, state.time_s, a, e > 0.5, problem.ds,
                          problem.gamma, row, problem.jams, problem.vmin, problem.gap)
        if not tr[0] or tr[1] > row[K.C_VBASE] + 1e-9:
            continue
        if K._locate(problem.sax, tr[2], K.MODE_NEAREST)[0] < 0:
            continue
        if K._locate(problem.taxes[s + 1], tr[3], K.MODE_NEAREST)[0] < 0:
            continue
        out.append(ControlInput(float(a), int(e)))
    return out


def extract_trajectory(policy: OptimalPolicy, vf: ValueFunction, problem: DpProblem,
                       x0: EgoState | None = None, terminal_cost=None) -> Trajectory:
    """Forward rollout from the continuous state, re-deciding at every node.

    Each step takes the control minimizing stage cost plus interpolated
    cost-to-go, which coincides with the stored policy at grid nodes.
    """
    del policy  # the greedy lookahead reproduces it on nodes and generalizes off them
    x0 = x0 or problem.x0
    return rollout(problem, vf.J, vf.mode, x0, terminal_cost or TerminalCost())


def rank_controls(problem: DpProblem, J_next: np.ndarray, mode: int, s: int, v: float, soc: float,
                  t: float) -> np.ndarray:
    """Admissible control indices from best to worst.

    In linear mode successors whose every interpolation corner is feasible
    come first; those relying on renormalized corners are kept as fallbacks.
    """
    args = (problem.p, problem.controls, problem.ds, problem.gamma, v, soc, t, problem.table[s + 1], problem.jams,
            problem.vmin, problem.gap, problem.vax, problem.sax, problem.taxes[s + 1], J_next)
    vals = K.lookahead_all(*args, mode)
    order = np.argsort(vals, kind="stable")
    order = order[np.isfinite(vals[order])]
    if mode != K.MODE_LINEAR:
        return order
    strict = K.lookahead_all(*args, K.MODE_STRICT)
    safe = np.isfinite(strict[order])
    first = order[safe]
    first = first[np.argsort(strict[first], kind="stable")]
    return np.concatenate([first, order[~safe]])


def plan_path(problem: DpProblem, J: list, mode: int, x0: EgoState, s_start: int = 0,
              n: int | None = None, max_expansions: int | None = None) -> list:
    """Control indices of a feasible greedy path through ``n`` layers.

    Each layer tries controls in order of stage cost plus interpolated
    cost-to-go.  Interpolation near the edge of the feasible set can be
    optimistic, so a dead end backtracks to the previous layer's next-best
    control instead of failing.
    """
    N = problem.n_steps - s_start if n is None else n
    budget = max_expansions if max_expansions is not None else 64 * max(N, 1)
    states = [(x0.v_mps, x0.soc_frac, x0.time_s)]
    ranks: list = []
    pos: list = []
    deepest = 0
    expansions = 0
    k = 0
    while k < N:
        if len(ranks) == k:
            v, soc, t = states[k]
            s = s_start + k
            ranks.append(rank_controls(problem, J[k + 1], mode, s, v, soc, t))
            pos.append(-1)
            expansions += 1
            deepest = max(deepest, k)
        pos[k] += 1
        if pos[k] >= len(ranks[k]) or expansions > budget:
            if k == 0 or expansions > budget:
                v, soc, t = states[min(deepest, len(states) - 1)]
                raise RolloutError(s_start + deepest,
                                   f"no admissible control from v={v:.3f} soc={soc:.5f} t={t:.3f}")
            ranks.pop()
            pos.pop()
            del states[k:]
            k -= 1
            continue
        ic = ranks[k][pos[k]]
        row = problem.table[s_start + k + 1]
        a, e = problem.controls[ic]
        tr = K.transition(problem.p, *states[k], a, e > 0.5, problem.ds, problem.gamma, row, problem.jams,
                          problem.vmin, problem.gap)
        del states[k + 1:]
        states.append((tr[1], tr[2], tr[3]))
        k += 1
    return [int(ranks[k][pos[k]]) for k in range(N)]


def rollout(problem: DpProblem, J: list, mode: int, x0: EgoState, terminal_cost, s_start: int = 0,
            n: int | None = None) -> Trajectory:
    N = problem.n_steps - s_start if n is None else n
    path = plan_path(problem, J, mode, x0, s_start, N)
    return simulate(problem, path, x0, terminal_cost, s_start)


def simulate(problem: DpProblem, path, x0: EgoState, terminal_cost, s_start: int = 0) -> Trajectory:
    """Apply a sequence of control indices and record every per-step quantity."""
    N = len(path)
    v, soc, t = x0.v_mps, x0.soc_frac, x0.time_s
    rec = {k: np.zeros(N) for k in ("a", "e", "f", "pb", "mf", "mfeq", "c", "g", "ta")}
    vs, ss, ts = [v], [soc], [t]
    for k, ic in enumerate(path):
        row = problem.table[s_start + k + 1]
        a, e = problem.controls[ic]
        tr = K.transition(problem.p, v, soc, t, a, e > 0.5, problem.ds, problem.gamma, row, problem.jams,
                          problem.vmin, problem.gap)
        if not tr[0]:
            raise RolloutError(s_start + k, f"control {ic} is not admissible")
        v, soc, t = tr[1], tr[2], tr[3]
        rec["a"][k], rec["e"][k] = a, e
        rec["f"][k], rec["pb"][k], rec["mf"][k], rec["mfeq"][k] = tr[8], tr[9], tr[10], tr[11]
        rec["c"][k], rec["g"][k], rec["ta"][k] = tr[4], tr[6], tr[5]
        vs.append(v)
        ss.append(soc)
        ts.append(t)
    tc = float(terminal_cost(np.array(v), np.array(soc), np.array(t)))
    x = problem.table[s_start:s_start + N + 1, K.C_X].copy()
    return Trajectory(x, np.array(ts), np.array(vs), np.array(ss), rec["a"], rec["e"].astype(int), rec["f"],
                      rec["pb"], rec["mf"], rec["mfeq"], rec["c"], rec["g"], rec["ta"], tc)


def empty_trajectory(x0: EgoState) -> Trajectory:
    z = np.zeros(0)
    return Trajectory(np.zeros(1), np.array([x0.time_s]), np.array([x0.v_mps]), np.array([x0.soc_frac]),
                      z, z.astype(int), z, z, z, z, z, z, z, 0.0)


def solve_scenario(scenario: Scenario, params: VehicleParams | None = None, grid: GridSpec | None = None,
                   gamma: float = 0.9, lead: LeadTrajectory | None = None, terminal_cost=None,
                   jam_aware: bool = True):
    """Build, solve and roll out; returns ``(problem, vf, policy, trajectory)``."""
    problem = build_problem(scenario, params, grid, gamma, lead, jam_aware)
    if problem.n_steps == 0:
        return problem, None, None, empty_trajectory(problem.x0)
    vf, pol = backward_induction(problem, terminal_cost)
    traj = extract_trajectory(pol, vf, problem, terminal_cost=terminal_cost)
    return problem, vf, pol, traj


def trajectory_to_lead(traj: Trajectory, provenance: str = "dp") -> LeadTrajectory:
    """Time/position/speed samples including the dwell at every stop."""
    t, x, v = [traj.t_s[0]], [traj.x_m[0]], [traj.v_mps[0]]
    for k in range(len(traj.accel)):
        t.append(traj.t_arrive_s[k])
        x.append(traj.x_m[k + 1])
        v.append(traj.v_mps[k + 1])
        if traj.t_s[k + 1] > traj.t_arrive_s[k]:
            t.append(traj.t_s[k + 1])
            x.append(traj.x_m[k + 1])
            v.append(traj.v_mps[k + 1])
    return LeadTrajectory(np.array(t), np.array(x), np.array(v), provenance)


def resolve_lead(scenario: Scenario, params: VehicleParams | None = None, grid: GridSpec | None = None):
    """Materialize the scenario's lead vehicle (``None`` when it has none)."""
    spec = scenario.lead
    if spec.kind == "none":
        return None
    if spec.kind == "constant":
        return constant_lead(scenario.route, spec.speed_mps, spec.t0_s)
    if spec.kind == "csv":
        return LeadTrajectory.load_csv(spec.path)
    if spec.kind == "dp":
        lead_scn = Scenario(scenario.name + "-lead", scenario.route, spec, spec.v0_mps, scenario.soc0, spec.t0_s)
        _, _, _, traj = solve_scenario(lead_scn, params, grid, spec.gamma)
        return trajectory_to_lead(traj)
    raise DpError(f"unknown lead kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# oracle


def brute_force_oracle(problem: DpProblem, terminal_cost=None, x0: EgoState | None = None,
                       budget: int = 10**7):
    """Exhaustive minimum over control sequences on the nearest-node discretization.

    Returns ``(cost, [ControlInput, ...])``; raises :class:`NoSolutionError`
    when no sequence is feasible.
    """
    N = problem.n_steps
    nc = problem.controls.shape[0]
    if nc**N > budget:
        raise BudgetExceededError(f"{nc}^{N} sequences exceed the budget of {budget}")
    x0 = x0 or problem.x0
    J_term = terminal_layer(problem, terminal_cost or TerminalCost())
    best, seq = K.oracle_search(problem.p, problem.controls, problem.ds, problem.gamma, problem.vax, problem.sax,
                                problem.taxes, problem.table, problem.jams, problem.vmin, problem.gap, J_term,
                                x0.v_mps, x0.soc_frac, x0.time_s, N)
    if not np.isfinite(best):
        raise NoSolutionError("no feasible control sequence from the initial state")
    return float(best), [ControlInput(float(problem.controls[i, 0]), int(problem.controls[i, 1])) for i in seq]


def random_tiny_problem(seed: int, n_steps: int = 8) -> DpProblem:
    """Small randomized instance for oracle cross-checks.

    Five velocity nodes, three SoC nodes, six time nodes per layer and six
    controls; a small battery makes SoC actually move between nodes.
    """
    from .world import TrafficJam, TrafficLight

    rng = np.random.default_rng(seed)
    ds = 10.0
    length = ds * n_steps
    lights = ()
    if rng.random() < 0.7 and n_steps >= 3:
        pos = float(rng.integers(2, n_steps) * ds)
        cycle = float(rng.integers(10, 30))
        lights = (TrafficLight(pos, cycle, float(rng.integers(3, int(cycle) - 2)), float(rng.integers(0, int(cycle)))),)
    jams = ()
    if rng.random() < 0.4 and n_steps >= 2:
        xj = float(rng.integers(1, n_steps) * ds)
        jams = (TrafficJam(xj, length, 0.0, 1e4, float(rng.choice([150.0, 170.0])), 0.1, 20.0),)
    route = Route(length, ((0.0, float(rng.choice([3.0, 4.0]))),), ds, lights, jams)
    params = VehicleParams(batt_capacity_coulomb=float(rng.uniform(2000.0, 6000.0)))
    accels = (float(rng.choice([-1.0, -0.5])), 0.0, float(rng.choice([0.5, 1.0])))
    grid = GridSpec(dv=1.0, soc_min=0.24, soc_max=0.26, dsoc=0.01, dt=float(rng.choice([2.0, 3.0])),
                    accels=accels, time_slack_s=5.0)
    v0 = float(rng.integers(2, 4))
    dt = grid.dt
    t0 = dt * float(rng.integers(0, 3))
    scn = Scenario("tiny", route, v0_mps=v0, soc0=0.25, t0_s=t0)
    lead = None
    if rng.random() < 0.3:
        lead = constant_lead(route, float(rng.uniform(2.5, 4.0)), t0 - float(rng.uniform(1.0, 4.0)))
    prob = build_problem(scn, params, grid, float(rng.uniform(0.3, 1.0)), lead)
    # six time nodes per layer centred on a cruise at the initial speed
    cruise = t0 + np.arange(n_steps + 1) * ds / v0
    prob.taxes[:, 2] = np.round(cruise / dt) - 2.0
    prob.taxes[0, 2] = t0 / dt - 2.0
    prob.taxes[:, 3] = 6.0
    prob.vax = np.array([0.0, 1.0, 0.0, 5.0])
    return prob


# ---------------------------------------------------------------------------
# persistence


def save_value_function(vf: ValueFunction, path, policy: OptimalPolicy | None = None) -> None:
    header = {
        "format": 1,
        "n_steps": vf.n_steps,
        "gamma": vf.gamma,
        "scenario_hash": vf.scenario_hash,
        "mode": int(vf.mode),
        "v_axis": vf.vax.tolist(),
        "soc_axis": vf.sax.tolist(),
    }
    arrays = {"taxes": vf.taxes}
    for s, J in enumerate(vf.J):
        arrays[f"J{s}"] = J
    if policy is not None:
        arrays["controls"] = policy.controls
        for s, P in enumerate(policy.index):
            arrays[f"P{s}"] = P
    buf = io.BytesIO()
    np.savez_compressed(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(VF_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(buf.getvalue())


def load_value_function(path):
    """Return ``(ValueFunction, OptimalPolicy | None, header)``."""
    with open(path, "rb") as fh:
        if fh.readline() != VF_MAGIC:
            raise DpError(f"{path}: not a value-function file")
        header = json.loads(fh.readline())
        data = np.load(io.BytesIO(fh.read()))
    n = header["n_steps"]
    vf = ValueFunction([data[f"J{s}"] for s in range(n + 1)], np.array(header["v_axis"]),
                       np.array(header["soc_axis"]), data["taxes"], header["gamma"], header["scenario_hash"],
                       header["mode"])
    pol = None
    if "controls" in data:
        pol = OptimalPolicy([data[f"P{s}"] for s in range(n)], data["controls"])
    return vf, pol, header


def dump_value_csv(vf: ValueFunction, path, finite_only: bool = True) -> int:
    """Write ``s,v,soc,t,J`` rows; returns the row count."""
    v = _axis_nodes(vf.vax)
    soc = _axis_nodes(vf.sax)
    rows = 0
    with open(path, "w") as fh:
        fh.write("s,v,soc,t,J\n")
        for s, J in enumerate(vf.J):
            t = _axis_nodes(vf.taxes[s])
            idx = np.argwhere(np.isfinite(J)) if finite_only else np.argwhere(np.ones_like(J, dtype=bool))
            for i, j, k in idx:
                fh.write(f"{s},{v[i]!r},{soc[j]!r},{t[k]!r},{J[i, j, k]!r}\n")
                rows += 1
    return rows

