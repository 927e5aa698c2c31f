"""Routes, fixed-cycle signals, Greenshields traffic jams and lead trajectories."""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit


class WorldError(ValueError):
    pass


class InvalidJamError(WorldError):
    pass


class ExtrapolationError(WorldError):
    """Query outside the span covered by a lead trajectory."""


@dataclass(frozen=True)
class TrafficLight:
    position_m: float
    cycle_s: float
    green_s: float
    offset_s: float = 0.0  # green starts at offset + k*cycle

    def __post_init__(self):
        if not 0 < self.green_s < self.cycle_s:
            raise WorldError("need 0 < green < cycle")

    @property
    def red_s(self) -> float:
        return self.cycle_s - self.green_s


@dataclass(frozen=True)
class TrafficJam:
    x_start_m: float
    x_end_m: float
    t_start_s: float
    t_end_s: float
    density_veh_per_km: float
    greenshield_c1: float = 0.1
    greenshield_c2: float = 20.0

    def __post_init__(self):
        if not (self.x_start_m < self.x_end_m and self.t_start_s < self.t_end_s):
            raise WorldError("jam window must have positive extent")
        jam_speed(self)

    def covers(self, x: float, t: float) -> bool:
        return self.x_start_m <= x < self.x_end_m and self.t_start_s <= t < self.t_end_s


@dataclass(frozen=True)
class Route:
    """A signalized corridor discretized in steps of ``ds_m``.

    ``speed_limits`` lists ``(start_position, limit)`` change points; the first
    one must start at 0.
    """

    length_m: float
    speed_limits: tuple = ((0.0, 15.0),)
    ds_m: float = 10.0
    lights: tuple = ()
    jams: tuple = ()
    min_speed_mps: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "speed_limits", tuple((float(a), float(b)) for a, b in self.speed_limits))
        object.__setattr__(self, "lights", tuple(self.lights))
        object.__setattr__(self, "jams", tuple(self.jams))
        if self.ds_m <= 0 or self.length_m < 0:
            raise WorldError("route length and step must be nonnegative/positive")
        n = self.length_m / self.ds_m
        if abs(n - round(n)) > 1e-9:
            raise WorldError("ds must divide the route length")
        starts = [p for p, _ in self.speed_limits]
        if not starts or starts[0] != 0.0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise WorldError("speed-limit change points must start at 0 and increase")
        pos = [lt.position_m for lt in self.lights]
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise WorldError("light positions must be strictly increasing")
        for p in pos:
            if not 0 <= p <= self.length_m:
                raise WorldError("light outside the route")
            k = p / self.ds_m
            if abs(k - round(k)) > 1e-9:
                raise WorldError("lights must sit on distance nodes")

    @property
    def n_steps(self) -> int:
        return int(round(self.length_m / self.ds_m))

    @property
    def light_positions(self) -> tuple:
        return tuple(lt.position_m for lt in self.lights)

    @property
    def v_max_global(self) -> float:
        return max(v for _, v in self.speed_limits)

    def base_limit(self, x: float) -> float:
        v = self.speed_limits[0][1]
        for start, lim in self.speed_limits:
            if start <= x:
                v = lim
        return v

    def light_at_node(self, s: int):
        x = s * self.ds_m
        for lt in self.lights:
            if abs(lt.position_m - x) < 1e-6:
                return lt
        return None

    def without_jams(self) -> "Route":
        return Route(self.length_m, self.speed_limits, self.ds_m, self.lights, (), self.min_speed_mps)


@dataclass(frozen=True)
class LeadTrajectory:
    t_s: np.ndarray
    x_m: np.ndarray
    v_mps: np.ndarray
    provenance: str = "synthetic"

    def __post_init__(self):
        t, x, v = (np.asarray(a, dtype=float) for a in (self.t_s, self.x_m, self.v_mps))
        object.__setattr__(self, "t_s", t)
        object.__setattr__(self, "x_m", x)
        object.__setattr__(self, "v_mps", v)
        if not (t.shape == x.shape == v.shape) or t.size < 2:
            raise WorldError("lead trajectory needs at least two aligned samples")
        if np.any(np.diff(t) <= 0):
            raise WorldError("lead sample times must increase")
        if np.any(np.diff(x) < 0):
            raise WorldError("lead position must be nondecreasing")
        if np.any(v < 0):
            raise WorldError("lead velocity must be nonnegative")

    def check_consistency(self, rtol: float = 1e-3) -> bool:
        dx = np.diff(self.x_m)
        trap = 0.5 * (self.v_mps[1:] + self.v_mps[:-1]) * np.diff(self.t_s)
        return bool(np.allclose(dx, trap, rtol=rtol, atol=1e-6 * max(1.0, float(self.x_m[-1]))))

    def position_at(self, t):
        return np.interp(t, self.t_s, self.x_m)

    def velocity_at(self, t):
        return np.interp(t, self.t_s, self.v_mps)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "x_m", "v_mps"])
            for row in zip(self.t_s, self.x_m, self.v_mps):
                w.writerow([repr(float(a)) for a in row])

    @classmethod
    def load_csv(cls, path, provenance: str = "replayed") -> "LeadTrajectory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or set(rows[0]) != {"t_s", "x_m", "v_mps"}:
            raise WorldError(f"{path}: expected header t_s,x_m,v_mps")
        arr = np.array([[float(r["t_s"]), float(r["x_m"]), float(r["v_mps"])] for r in rows])
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], provenance)


# ---------------------------------------------------------------------------
# operations


@njit(cache=True)
def _phase(t, cycle, green, offset):
    """(is_green, remaining red time) of a fixed-cycle light."""
    tau = (t - offset) % cycle
    if tau < green:
        return True, 0.0
    return False, cycle - tau


def signal_phase(light: TrafficLight, t: float):
    """Return ``(phase, t_rg, next_green_window)``.

    The window is the current green interval when green, otherwise the next one.
    """
    if t < 0:
        raise WorldError("time must be nonnegative")
    green, t_rg = _phase(float(t), light.cycle_s, light.green_s, light.offset_s)
    if green:
        tau = (t - light.offset_s) % light.cycle_s
        start = t - tau
    else:
        start = t + t_rg
    return ("green" if green else "red"), float(t_rg), (float(start), float(start + light.green_s))


def jam_speed(jam: TrafficJam) -> float:
    """Greenshields average jam speed c2 - c1*rho."""
    v = jam.greenshield_c2 - jam.greenshield_c1 * jam.density_veh_per_km
    if v <= 0:
        raise InvalidJamError(f"jam speed {v:.3f} m/s is not positive")
    return v


def effective_speed_limit(route: Route, x: float, t: float) -> float:
    """Base limit at ``x`` tightened by every jam whose window covers (x, t)."""
    lim = route.base_limit(x)
    for jam in route.jams:
        if jam.covers(x, t):
            lim = min(lim, jam_speed(jam))
    return max(lim, route.min_speed_mps)


def lead_time_at(lead: LeadTrajectory, x: float) -> float:
    """First time the lead reaches position ``x``."""
    xs = lead.x_m
    if x < xs[0] or x > xs[-1]:
        raise ExtrapolationError(f"position {x} outside lead span [{xs[0]}, {xs[-1]}]")
    i = int(np.searchsorted(xs, x, side="left"))
    if xs[i] == x:
        return float(lead.t_s[i])
    x0, x1 = xs[i - 1], xs[i]
    t0, t1 = lead.t_s[i - 1], lead.t_s[i]
    return float(t0 + (x - x0) / (x1 - x0) * (t1 - t0))


def lead_times_at_nodes(lead: LeadTrajectory, xs) -> np.ndarray:
    """Vectorized :func:`lead_time_at`; NaN where the lead never gets."""
    out = np.full(len(xs), np.nan)
    for k, x in enumerate(xs):
        if lead.x_m[0] <= x <= lead.x_m[-1]:
            out[k] = lead_time_at(lead, float(x))
    return out


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class LeadSpec:
    """How the lead vehicle trajectory is obtained.

    ``kind`` is ``dp`` (solved on the same route), ``csv`` (replayed) or
    ``constant`` (uniform speed from the start) or ``none``.
    """

    kind: str = "dp"
    gamma: float = 0.97
    v0_mps: float = 0.0
    t0_s: float = 0.0
    speed_mps: float = 10.0
    path: str = ""


@dataclass(frozen=True)
class Scenario:
    name: str
    route: Route
    lead: LeadSpec = field(default_factory=LeadSpec)
    v0_mps: float = 0.0
    soc0: float = 0.25
    t0_s: float = 3.0

    def without_jams(self) -> "Scenario":
        return Scenario(self.name, self.route.without_jams(), self.lead, self.v0_mps, self.soc0, self.t0_s)


# Default corridor geometry: chosen to echo the figure-level layout (an early
# light near 200 m, congestion toward the end of the trip); not measured data.
_ROUTE1 = dict(
    length_m=2000.0,
    speed_limits=((0.0, 15.0), (600.0, 17.0)),
    lights=(TrafficLight(250.0, 60.0, 30.0, 20.0), TrafficLight(1100.0, 60.0, 30.0, 40.0)),
    jams=(TrafficJam(1400.0, 2000.0, 0.0, 1.0e4, 100.0, 0.1, 20.0),),
)
_ROUTE2 = dict(
    length_m=5000.0,
    speed_limits=((0.0, 15.0), (800.0, 17.0), (3000.0, 15.0)),
    lights=(
        TrafficLight(250.0, 60.0, 30.0, 20.0),
        TrafficLight(1300.0, 70.0, 35.0, 10.0),
        TrafficLight(2200.0, 60.0, 30.0, 50.0),
        TrafficLight(3200.0, 60.0, 30.0, 0.0),
    ),
    jams=(TrafficJam(3400.0, 5000.0, 0.0, 1.0e4, 100.0, 0.1, 20.0),),
)


def build_scenario(scenario_id: str) -> Scenario:
    """The two benchmark corridors (2 km / 2 lights and 5 km / 4 lights)."""
    if scenario_id == "route1":
        return Scenario("route1", Route(**_ROUTE1))
    if scenario_id == "route2":
        return Scenario("route2", Route(**_ROUTE2))
    raise WorldError(f"unknown scenario id {scenario_id!r}")


def load_scenario(path) -> Scenario:
    """Read a scenario INI with sections [route], [light.i], [jam.j], [lead], [ego]."""
    path = Path(path)
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(str(path))
    try:
        r = cp["route"]
        limits = tuple(
            tuple(float(v) for v in item.split(":")) for item in r.get("speed_limits", "0:15").split(",")
        )
        lights = []
        jams = []
        for sec in sorted(cp.sections(), key=_section_key):
            if sec.startswith("light."):
                s = cp[sec]
                lights.append(TrafficLight(s.getfloat("position_m"), s.getfloat("cycle_s"),
                                           s.getfloat("green_s"), s.getfloat("offset_s", 0.0)))
            elif sec.startswith("jam."):
                s = cp[sec]
                jams.append(TrafficJam(s.getfloat("x_start_m"), s.getfloat("x_end_m"),
                                       s.getfloat("t_start_s"), s.getfloat("t_end_s"),
                                       s.getfloat("density_veh_per_km"),
                                       s.getfloat("greenshield_c1", 0.1), s.getfloat("greenshield_c2", 20.0)))
        route = Route(r.getfloat("length_m"), limits, r.getfloat("ds_m", 10.0), tuple(lights), tuple(jams),
                      r.getfloat("min_speed_mps", 0.0))
        lead = LeadSpec()
        if cp.has_section("lead"):
            s = cp["lead"]
            lead_path = s.get("path", "")
            if lead_path and not Path(lead_path).is_absolute():
                lead_path = str(path.parent / lead_path)
            lead = LeadSpec(s.get("kind", "dp"), s.getfloat("gamma", 0.97), s.getfloat("v0_mps", 0.0),
                            s.getfloat("t0_s", 0.0), s.getfloat("speed_mps", 10.0), lead_path)
        ego = cp["ego"] if cp.has_section("ego") else {}
        return Scenario(
            r.get("name", path.stem), route, lead,
            float(ego.get("v0_mps", 0.0)), float(ego.get("soc0", 0.25)), float(ego.get("t0_s", 3.0)),
        )
    except KeyError as exc:
        raise WorldError(f"{path}: missing section or key {exc}") from None


def save_scenario(scn: Scenario, path) -> None:
    cp = configparser.ConfigParser()
    r = scn.route
    cp["route"] = {
        "name": scn.name,
        "length_m": repr(r.length_m),
        "ds_m": repr(r.ds_m),
        "min_speed_mps": repr(r.min_speed_mps),
        "speed_limits": ",".join(f"{a!r}:{b!r}" for a, b in r.speed_limits),
    }
    for i, lt in enumerate(r.lights):
        cp[f"light.{i}"] = {k: repr(getattr(lt, k)) for k in ("position_m", "cycle_s", "green_s", "offset_s")}
    for j, jam in enumerate(r.jams):
        cp[f"jam.{j}"] = {k: repr(getattr(jam, k)) for k in (
            "x_start_m", "x_end_m", "t_start_s", "t_end_s", "density_veh_per_km",
            "greenshield_c1", "greenshield_c2")}
    ld = scn.lead
    cp["lead"] = {"kind": ld.kind, "gamma": repr(ld.gamma), "v0_mps": repr(ld.v0_mps),
                  "t0_s": repr(ld.t0_s), "speed_mps": repr(ld.speed_mps), "path": ld.path}
    cp["ego"] = {"v0_mps": repr(scn.v0_mps), "soc0": repr(scn.soc0), "t0_s": repr(scn.t0_s)}
    with open(path, "w") as fh:
        cp.write(fh)


def _section_key(name: str):
    head, _, idx = name.partition(".")
    return (head, int(idx) if idx.isdigit() else math.inf, name)


def constant_lead(route: Route, speed: float, t0: float = 0.0) -> LeadTrajectory:
    """Lead moving at a uniform speed from the route origin, sampled per node."""
    x = np.linspace(0.0, route.length_m, route.n_steps + 1)
    return LeadTrajectory(t0 + x / speed, x, np.full_like(x, speed), "synthetic")


def generate_scenarios(n: int, seed: int, ds: float = 10.0) -> list[Scenario]:
    """Seeded corpus of synthetic corridors used to train the terminal-cost nets.

    Lengths span 1-5 km with 1-4 lights at randomized offsets; every other
    corridor carries a downstream jam.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        length = float(rng.integers(10, 51) * 100)
        n_lights = int(rng.integers(1, 5))
        n_lights = min(n_lights, max(1, int(length // 600)))
        slots = np.sort(rng.choice(np.arange(2, int(length // 100) - 1), size=n_lights, replace=False))
        lights = []
        for k in slots:
            cycle = float(rng.choice([50.0, 60.0, 70.0]))
            green = float(round(cycle * rng.uniform(0.4, 0.6)))
            lights.append(TrafficLight(float(k * 100 + rng.integers(0, 10) * ds), cycle, green,
                                       float(rng.integers(0, int(cycle)))))
        limits = [(0.0, float(rng.choice([13.0, 15.0, 17.0])))]
        if length >= 2000 and rng.random() < 0.7:
            limits.append((float(rng.integers(5, int(length // 200)) * 100), float(rng.choice([13.0, 15.0, 17.0]))))
            if limits[1][1] == limits[0][1]:
                limits.pop()
        jams = ()
        if i % 2 == 1:
            frac = rng.uniform(0.3, 0.6)
            x0 = float(round(length * (1 - frac) / 100) * 100)
            jams = (TrafficJam(x0, length, 0.0, 1.0e4, float(rng.choice([80.0, 100.0, 120.0])), 0.1, 20.0),)
        route = Route(length, tuple(limits), ds, tuple(lights), jams)
        lead = LeadSpec("dp", float(rng.choice([0.95, 0.97, 0.99])))
        out.append(Scenario(f"corpus{i:02d}", route, lead, 0.0, 0.25, float(rng.choice([3.0, 4.0, 6.0]))))
    return out


def scenario_variants(base: Scenario, n: int, seed: int) -> list[Scenario]:
    """Seeded perturbations of a corridor: signal offsets, jam extent and density, lead behavior.

    Geometry (length, limits, light positions and cycles) is kept; everything
    a driver could not know in advance is redrawn.
    """
    rng = np.random.default_rng(seed)
    route = base.route
    out = []
    for i in range(n):
        lights = tuple(TrafficLight(lt.position_m, lt.cycle_s, lt.green_s, float(rng.integers(0, int(lt.cycle_s))))
                       for lt in route.lights)
        jams = []
        for jm in route.jams:
            shift = float(rng.integers(-3, 4) * 100)
            x0 = min(max(jm.x_start_m + shift, route.ds_m), jm.x_end_m - 100.0)
            jams.append(TrafficJam(x0, jm.x_end_m, jm.t_start_s, jm.t_end_s,
                                   float(rng.choice([80.0, 100.0, 120.0])), jm.greenshield_c1, jm.greenshield_c2))
        lead = LeadSpec("dp", float(rng.choice([0.95, 0.97, 0.99])))
        r = Route(route.length_m, route.speed_limits, route.ds_m, lights, tuple(jams), route.min_speed_mps)
        out.append(Scenario(f"{base.name}-v{i:02d}", r, lead, base.v0_mps, base.soc0,
                            float(rng.choice([3.0, 4.0, 6.0]))))
    return out
