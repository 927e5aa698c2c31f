"""Distance-domain longitudinal dynamics, battery model and fuel surrogate.

The scalar cores are numba-compiled so that the DP kernels, the brute-force
oracle and the closed-loop plant all execute the exact same arithmetic.  The
public wrappers validate their inputs and raise; the cores never raise and
signal failure through flags or NaN.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from numba import njit


class VehicleModelError(ValueError):
    """Input outside the domain of a vehicle-model operation."""


class InfeasiblePowerError(VehicleModelError):
    """Electrical demand exceeds what the battery can deliver."""


class ConstraintError(VehicleModelError):
    """A force or acceleration bound is violated."""


# Positions of the packed parameter vector consumed by the compiled cores.
P_MASS = 0
P_A0 = 1
P_A1 = 2
P_A2 = 3
P_CAP = 4
P_OCV0 = 5
P_OCV1 = 6
P_R00 = 7
P_R01 = 8
P_IDLE = 9
P_WILLANS = 10
P_LHV = 11
P_KBATT = 12
P_MFNORM = 13
P_AMIN = 14
P_AMAX = 15
P_FMIN = 16
P_FMAX = 17
P_AUX = 18
P_REGEN = 19
N_PARAMS = 20


@dataclass(frozen=True)
class VehicleParams:
    """Parameter set of the powertrain surrogate.

    Open-circuit voltage and internal resistance are affine in SoC:
    ``V_oc = ocv_v0 + ocv_slope * soc`` and ``R_0 = r0_ohm + r0_slope * soc``.
    Fuel flow follows a Willans line ``idle + willans_slope * P_tractive``.
    Defaults are a generic mid-size PHEV, not measured data.
    """

    equiv_mass_kg: float = 2200.0
    a0: float = 160.0  # N
    a1: float = 1.5  # N s/m
    a2: float = 0.42  # N s^2/m^2
    batt_capacity_coulomb: float = 3.6e5
    ocv_v0: float = 340.0  # V
    ocv_slope: float = 60.0  # V per unit SoC
    r0_ohm: float = 0.12
    r0_slope: float = -0.02
    fuel_idle_rate: float = 0.2  # g/s
    willans_slope: float = 6.6e-5  # g/J
    lhv_J_per_g: float = 43000.0
    k_batt: float = 1.0
    fuel_norm_rate: float = 2.0  # g/s
    accel_min: float = -3.0
    accel_max: float = 2.0
    force_min: float = -9000.0
    force_max: float = 6000.0
    aux_elec_load_W: float = 400.0
    regen_eff: float = 0.6

    def __post_init__(self):
        for name in ("equiv_mass_kg", "batt_capacity_coulomb", "lhv_J_per_g", "fuel_norm_rate"):
            if not getattr(self, name) > 0:
                raise VehicleModelError(f"{name} must be positive")
        for soc in (0.0, 1.0):
            if self.ocv(soc) <= 0:
                raise VehicleModelError("open-circuit voltage must be positive on [0, 1]")
            if self.resistance(soc) <= 0:
                raise VehicleModelError("internal resistance must be positive on [0, 1]")
        if self.a0 < 0 or self.a2 < 0:
            raise VehicleModelError("road-load coefficients a0, a2 must be nonnegative")
        # minimum of the quadratic on the admissible speed range
        v_star = -self.a1 / (2 * self.a2) if self.a2 > 0 else 0.0
        for v in (0.0, min(max(v_star, 0.0), 60.0), 60.0):
            if self.a0 + self.a1 * v + self.a2 * v * v < 0:
                raise VehicleModelError("road load must be nonnegative for v >= 0")
        if not self.accel_min < 0 < self.accel_max:
            raise VehicleModelError("acceleration bounds must straddle zero")
        if not self.force_min < self.force_max:
            raise VehicleModelError("tractive force bounds are empty")
        if not 0.0 <= self.regen_eff <= 1.0:
            raise VehicleModelError("regen efficiency must lie in [0, 1]")

    def ocv(self, soc: float) -> float:
        return self.ocv_v0 + self.ocv_slope * soc

    def resistance(self, soc: float) -> float:
        return self.r0_ohm + self.r0_slope * soc

    def as_array(self) -> np.ndarray:
        p = np.empty(N_PARAMS)
        p[P_MASS] = self.equiv_mass_kg
        p[P_A0], p[P_A1], p[P_A2] = self.a0, self.a1, self.a2
        p[P_CAP] = self.batt_capacity_coulomb
        p[P_OCV0], p[P_OCV1] = self.ocv_v0, self.ocv_slope
        p[P_R00], p[P_R01] = self.r0_ohm, self.r0_slope
        p[P_IDLE], p[P_WILLANS] = self.fuel_idle_rate, self.willans_slope
        p[P_LHV], p[P_KBATT], p[P_MFNORM] = self.lhv_J_per_g, self.k_batt, self.fuel_norm_rate
        p[P_AMIN], p[P_AMAX] = self.accel_min, self.accel_max
        p[P_FMIN], p[P_FMAX] = self.force_min, self.force_max
        p[P_AUX], p[P_REGEN] = self.aux_elec_load_W, self.regen_eff
        return p

    @classmethod
    def from_mapping(cls, values) -> "VehicleParams":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise VehicleModelError(f"unknown vehicle parameter(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})

    @classmethod
    def load(cls, path) -> "VehicleParams":
        """Read the ``[vehicle]`` section of an INI file (SI units throughout)."""
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not cp.read(path):
            raise FileNotFoundError(path)
        if not cp.has_section("vehicle"):
            return cls()
        return cls.from_mapping(dict(cp["vehicle"]))

    def save(self, path) -> None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["vehicle"] = {k: repr(v) for k, v in asdict(self).items()}
        with open(Path(path), "w") as fh:
            cp.write(fh)


@dataclass(frozen=True)
class EgoState:
    v_mps: float
    soc_frac: float
    time_s: float

    def __post_init__(self):
        if self.v_mps < 0:
            raise VehicleModelError("velocity must be nonnegative")
        if not 0.0 <= self.soc_frac <= 1.0:
            raise VehicleModelError("SoC must lie in [0, 1]")
        if self.time_s < 0:
            raise VehicleModelError("time must be nonnegative")


@dataclass(frozen=True)
class ControlInput:
    accel_mps2: float
    engine_on: int


@dataclass(frozen=True)
class PowerFlows:
    tractive_force_N: float
    road_load_N: float
    tractive_power_W: float
    batt_power_W: float
    elec_demand_W: float
    fuel_rate_gps: float
    equiv_fuel_rate_gps: float


# ---------------------------------------------------------------------------
# compiled cores


@njit(cache=True)
def _road_load(p, v):
    return p[P_A0] + p[P_A1] * v + p[P_A2] * v * v


@njit(cache=True)
def _step_velocity(p, v, f_tr, ds):
    """Return (v_next, overbrake); overbrake means the vehicle stops inside the step."""
    rad = v * v + 2.0 * ds * ((f_tr - _road_load(p, v)) / p[P_MASS])
    if rad < 0.0:
        return 0.0, True
    return math.sqrt(rad), False


@njit(cache=True)
def _ocv(p, soc):
    return p[P_OCV0] + p[P_OCV1] * soc


@njit(cache=True)
def _resistance(p, soc):
    return p[P_R00] + p[P_R01] * soc


@njit(cache=True)
def _battery_current(p, soc, p_dmd):
    """Smaller root of V_oc*I - R_0*I^2 = P, NaN when the discriminant is negative."""
    voc = _ocv(p, soc)
    r0 = _resistance(p, soc)
    disc = voc * voc - 4.0 * r0 * p_dmd
    if disc < 0.0:
        return np.nan
    # cancellation-free form of (voc - sqrt(disc)) / (2 r0)
    return 2.0 * p_dmd / (voc + math.sqrt(disc))


@njit(cache=True)
def _power_split(p, v, f_tr, engine_on):
    """Return (tractive_power, elec_demand, fuel_rate)."""
    p_tr = f_tr * v
    if engine_on:
        mf = p[P_IDLE] + p[P_WILLANS] * p_tr
        if mf < p[P_IDLE]:
            mf = p[P_IDLE]
        return p_tr, p[P_AUX], mf
    if p_tr >= 0.0:
        return p_tr, p_tr + p[P_AUX], 0.0
    return p_tr, p[P_REGEN] * p_tr + p[P_AUX], 0.0


@njit(cache=True)
def _equiv_fuel_rate(p, mf, p_batt):
    return mf + p[P_KBATT] * p_batt / p[P_LHV]


@njit(cache=True)
def _stage_cost(p, mfeq, dt, gamma):
    return (gamma * mfeq / p[P_MFNORM] + (1.0 - gamma)) * dt


@njit(cache=True)
def _advance(p, v, soc, accel, engine_on, ds, gamma):
    """One distance step of the plant, independent of clock and route.

    Returns (ok, v1, soc1, dt, cost, f_tr, f_road, p_batt, p_dmd, mf, mfeq,
    overbrake).  ``ok`` is False when the vehicle cannot leave the node, the
    force bounds are violated or the battery cannot supply the demand.
    """
    bad = (False, 0.0, soc, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, False)
    if accel < p[P_AMIN] or accel > p[P_AMAX]:
        return bad
    f_road = _road_load(p, v)
    f_tr = p[P_MASS] * accel + f_road
    v1, overbrake = _step_velocity(p, v, f_tr, ds)
    if overbrake:
        if v <= 0.0:
            return bad
        # the vehicle comes to rest exactly at the next node
        f_tr = f_road - p[P_MASS] * v * v / (2.0 * ds)
    if f_tr < p[P_FMIN] or f_tr > p[P_FMAX]:
        return bad
    vbar = 0.5 * (v + v1)
    if vbar <= 0.0:
        return bad
    dt = ds / vbar
    p_tr, p_dmd, mf = _power_split(p, vbar, f_tr, engine_on)
    cur = _battery_current(p, soc, p_dmd)
    if cur != cur:
        return bad
    soc1 = soc - ds / (vbar * p[P_CAP]) * cur
    p_batt = _ocv(p, soc) * cur
    mfeq = _equiv_fuel_rate(p, mf, p_batt)
    cost = _stage_cost(p, mfeq, dt, gamma)
    return (True, v1, soc1, dt, cost, f_tr, f_road, p_batt, p_dmd, mf, mfeq, overbrake)


# ---------------------------------------------------------------------------
# public operations


def road_load(v: float, params: VehicleParams) -> float:
    """Quadratic road-load force a0 + a1 v + a2 v^2 [N]."""
    if v < 0:
        raise VehicleModelError("road_load: speed must be nonnegative")
    return float(_road_load(params.as_array(), float(v)))


def step_velocity(v: float, f_tr: float, params: VehicleParams, ds: float) -> tuple[float, bool]:
    """Velocity at the next node; the flag is set when the step over-brakes."""
    if v < 0 or ds <= 0:
        raise VehicleModelError("step_velocity: need v >= 0 and ds > 0")
    v1, flag = _step_velocity(params.as_array(), float(v), float(f_tr), float(ds))
    return float(v1), bool(flag)


def battery_current(soc: float, p_dmd: float, params: VehicleParams) -> float:
    cur = _battery_current(params.as_array(), float(soc), float(p_dmd))
    if math.isnan(cur):
        raise InfeasiblePowerError(
            f"demand {p_dmd:.1f} W exceeds battery capability at SoC {soc:.3f}"
        )
    return float(cur)


def step_soc(soc: float, p_dmd: float, v_bar: float, ds: float, params: VehicleParams) -> tuple[float, bool]:
    """SoC at the next node and a saturation flag (result clamped to [0, 1])."""
    if v_bar <= 0:
        raise VehicleModelError("step_soc: mean speed must be positive; use the stop arc at lights")
    if not 0.0 <= soc <= 1.0:
        raise VehicleModelError("step_soc: SoC must lie in [0, 1]")
    cur = battery_current(soc, p_dmd, params)
    soc1 = soc - ds / (v_bar * params.batt_capacity_coulomb) * cur
    clamped = min(1.0, max(0.0, soc1))
    return clamped, clamped != soc1


def step_time(t: float, v_bar: float, ds: float, at_red_light: bool = False, t_rg: float = 0.0) -> float:
    if ds <= 0:
        raise VehicleModelError("step_time: ds must be positive")
    if at_red_light and v_bar == 0:
        return t + t_rg
    if v_bar <= 0:
        raise VehicleModelError("step_time: mean speed must be positive away from a light")
    return t + ds / v_bar


def power_split(v: float, f_tr: float, engine_on: int, params: VehicleParams, soc: float = 0.5) -> PowerFlows:
    """Power flows for a tractive force at speed ``v``.

    Engine off: the battery covers traction plus auxiliaries, braking power is
    recuperated at ``regen_eff``.  Engine on: the engine covers traction on its
    Willans line and the battery only the auxiliaries.  Battery power is the
    chemical power ``V_oc(soc) * I`` and so includes the resistive loss.
    """
    if not params.force_min <= f_tr <= params.force_max:
        raise ConstraintError(f"tractive force {f_tr:.1f} N outside bounds")
    p = params.as_array()
    p_tr, p_dmd, mf = _power_split(p, float(v), float(f_tr), bool(engine_on))
    cur = battery_current(soc, p_dmd, params)
    p_batt = params.ocv(soc) * cur
    return PowerFlows(
        tractive_force_N=float(f_tr),
        road_load_N=float(_road_load(p, float(v))),
        tractive_power_W=float(p_tr),
        batt_power_W=float(p_batt),
        elec_demand_W=float(p_dmd),
        fuel_rate_gps=float(mf),
        equiv_fuel_rate_gps=float(_equiv_fuel_rate(p, mf, p_batt)),
    )


def stage_cost(state: EgoState | None, flows: PowerFlows, dt: float, gamma: float, params: VehicleParams) -> float:
    """Fuel/time tradeoff cost of one step, weighted by the step's elapsed time."""
    if not 0.0 <= gamma <= 1.0:
        raise VehicleModelError("gamma must lie in [0, 1]")
    if dt <= 0:
        raise VehicleModelError("dt must be positive")
    return float(_stage_cost(params.as_array(), flows.equiv_fuel_rate_gps, float(dt), float(gamma)))
