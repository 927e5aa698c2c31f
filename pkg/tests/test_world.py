"""Routes, signals, jams and lead trajectories."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecodrive import world as W
from ecodrive.world import LeadTrajectory, Route, TrafficJam, TrafficLight


def _jam(rho, c1=0.1, c2=20.0, x=(100.0, 300.0), t=(10.0, 50.0)):
    return TrafficJam(x[0], x[1], t[0], t[1], rho, c1, c2)


# -- signals -----------------------------------------------------------------


@pytest.mark.parametrize(
    "offset, t, phase, t_rg",
    [(0.0, 10.0, "green", 0.0), (0.0, 40.0, "red", 20.0), (15.0, 5.0, "red", 10.0)],
)
def test_signal_phase_examples(offset, t, phase, t_rg):
    ph, rg, _ = W.signal_phase(TrafficLight(0.0, 60.0, 30.0, offset), t)
    assert ph == phase
    assert rg == pytest.approx(t_rg)


def test_light_invariants():
    with pytest.raises(W.WorldError):
        TrafficLight(0.0, 60.0, 60.0)
    with pytest.raises(W.WorldError):
        TrafficLight(0.0, 60.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(t=st.floats(0.0, 1e4), cycle=st.integers(20, 120), frac=st.floats(0.1, 0.9), off=st.integers(0, 119))
def test_signal_phase_periodic_and_sound(t, cycle, frac, off):
    green = max(1, min(cycle - 1, round(cycle * frac)))
    lt = TrafficLight(0.0, float(cycle), float(green), float(off % cycle))
    ph, rg, (g0, g1) = W.signal_phase(lt, t)
    ph2, rg2, _ = W.signal_phase(lt, t + cycle)
    assert ph == ph2
    assert rg == pytest.approx(rg2, abs=1e-6)
    assert (rg == 0.0) == (ph == "green")
    if ph == "green":
        assert g0 - 1e-9 <= t < g1 + 1e-9
    else:
        assert g0 == pytest.approx(t + rg)
        assert g1 - g0 == pytest.approx(green)


# -- jams --------------------------------------------------------------------


def test_jam_speed_empty_road():
    assert W.jam_speed(_jam(0.0)) == 20.0


def test_jam_speed_linear():
    assert W.jam_speed(_jam(100.0)) == pytest.approx(10.0)


def test_jam_speed_invalid():
    with pytest.raises(W.InvalidJamError):
        _jam(200.0)


@settings(max_examples=100, deadline=None)
@given(r1=st.floats(0.0, 150.0), r2=st.floats(0.0, 150.0), c1=st.floats(0.01, 0.12))
def test_jam_speed_slope(r1, r2, c1):
    if abs(r1 - r2) < 1.0:
        return
    v1 = W.jam_speed(_jam(r1, c1))
    v2 = W.jam_speed(_jam(r2, c1))
    assert (v2 - v1) / (r2 - r1) == pytest.approx(-c1, rel=1e-9)


def test_effective_limit_branches():
    route = Route(400.0, ((0.0, 17.0),), 10.0, (), (_jam(100.0),))
    assert W.effective_speed_limit(route, 50.0, 20.0) == 17.0  # before the jam
    assert W.effective_speed_limit(route, 150.0, 5.0) == 17.0  # jam not started
    assert W.effective_speed_limit(route, 150.0, 20.0) == 10.0  # inside
    assert W.effective_speed_limit(route, 350.0, 20.0) == 17.0  # past it


def test_effective_limit_overlap_takes_minimum():
    route = Route(400.0, ((0.0, 17.0),), 10.0, (), (_jam(100.0), _jam(120.0)))
    assert W.effective_speed_limit(route, 150.0, 20.0) == pytest.approx(8.0)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(0.0, 400.0), t=st.floats(0.0, 100.0))
def test_effective_limit_never_exceeds_base(x, t):
    jam = _jam(100.0)
    route = Route(400.0, ((0.0, 13.0), (200.0, 17.0)), 10.0, (), (jam,))
    lim = W.effective_speed_limit(route, x, t)
    assert lim <= route.base_limit(x)
    if not jam.covers(x, t):
        assert lim == route.base_limit(x)


# -- lead --------------------------------------------------------------------


def test_lead_time_uniform_motion():
    route = Route(200.0)
    lead = W.constant_lead(route, 10.0)
    assert W.lead_time_at(lead, 100.0) == pytest.approx(10.0)


def test_lead_time_at_sample_is_exact():
    lead = LeadTrajectory([0.0, 3.3, 7.1], [0.0, 17.0, 40.0], [5.0, 5.0, 6.0])
    assert W.lead_time_at(lead, 17.0) == 3.3


def test_lead_time_before_a_stop():
    # 10 m/s to 100 m, standing 10 s, then on again
    lead = LeadTrajectory([0.0, 10.0, 20.0, 30.0], [0.0, 100.0, 100.0, 200.0], [10.0, 0.0, 0.0, 10.0])
    assert W.lead_time_at(lead, 99.0) == pytest.approx(9.9)
    assert W.lead_time_at(lead, 100.0) == pytest.approx(10.0)  # first arrival, not the departure
    assert W.lead_time_at(lead, 150.0) == pytest.approx(25.0)


def test_lead_time_out_of_span():
    lead = W.constant_lead(Route(200.0), 10.0)
    with pytest.raises(W.ExtrapolationError):
        W.lead_time_at(lead, 250.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 5.0), st.floats(0.0, 20.0)), min_size=2, max_size=30))
def test_lead_time_monotone(steps):
    t = np.cumsum([0.0] + [a for a, _ in steps])
    x = np.cumsum([0.0] + [b for _, b in steps])
    lead = LeadTrajectory(t, x, np.zeros_like(t))
    xs = np.linspace(0.0, x[-1], 50)
    times = [W.lead_time_at(lead, float(q)) for q in xs]
    assert np.all(np.diff(times) >= 0)


def test_lead_rejects_backwards_motion():
    with pytest.raises(W.WorldError):
        LeadTrajectory([0.0, 1.0], [10.0, 5.0], [1.0, 1.0])


def test_lead_csv_roundtrip(tmp_path):
    lead = LeadTrajectory([0.0, 1.5, 4.0], [0.0, 12.0, 30.0], [8.0, 8.0, 6.4], "dp")
    path = tmp_path / "lead.csv"
    lead.save_csv(path)
    back = LeadTrajectory.load_csv(path)
    assert np.array_equal(back.t_s, lead.t_s) and np.array_equal(back.x_m, lead.x_m)
    assert back.provenance == "replayed"
    assert open(path).readline().strip() == "t_s,x_m,v_mps"


def test_constant_lead_is_consistent():
    assert W.constant_lead(Route(500.0), 10.0).check_consistency()


# -- scenarios ---------------------------------------------------------------


def test_route1_layout():
    scn = W.build_scenario("route1")
    assert scn.route.length_m == 2000.0
    assert len(scn.route.light_positions) == 2
    assert [W.jam_speed(j) for j in scn.route.jams] == [pytest.approx(10.0)]


def test_route2_layout():
    scn = W.build_scenario("route2")
    assert scn.route.length_m == 5000.0
    assert len(scn.route.light_positions) == 4


def test_unknown_scenario():
    with pytest.raises(W.WorldError):
        W.build_scenario("route3")


def test_route_invariants():
    with pytest.raises(W.WorldError):
        Route(105.0, ds_m=10.0)
    with pytest.raises(W.WorldError):
        Route(200.0, lights=(TrafficLight(150.0, 60, 30), TrafficLight(100.0, 60, 30)))
    with pytest.raises(W.WorldError):
        Route(200.0, speed_limits=((10.0, 15.0),))


@pytest.mark.parametrize("sid", ["route1", "route2"])
def test_scenario_file_roundtrip(tmp_path, sid):
    scn = W.build_scenario(sid)
    path = tmp_path / f"{sid}.ini"
    W.save_scenario(scn, path)
    assert W.load_scenario(path) == scn


def test_generated_corpus_is_seeded():
    a = W.generate_scenarios(4, 7)
    b = W.generate_scenarios(4, 7)
    assert a == b
    assert a != W.generate_scenarios(4, 8)


def test_variants_keep_geometry():
    base = W.build_scenario("route1")
    for v in W.scenario_variants(base, 3, 0):
        assert v.route.length_m == base.route.length_m
        assert v.route.light_positions == base.route.light_positions
        assert v.route.speed_limits == base.route.speed_limits
