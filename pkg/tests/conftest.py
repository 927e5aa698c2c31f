from __future__ import annotations

import pytest

from ecodrive import dp
from ecodrive.world import LeadSpec, Route, Scenario, TrafficJam, TrafficLight

SMALL_GRID = dp.GridSpec(soc_min=0.24, soc_max=0.26, time_slack_s=10.0)


def small_route(jam: bool = False, length: float = 500.0) -> Route:
    jams = (TrafficJam(300.0, length, 0.0, 1e4, 100.0, 0.1, 20.0),) if jam else ()
    return Route(length, ((0.0, 12.0),), 10.0, (TrafficLight(200.0, 40.0, 20.0, 5.0),), jams)


def small_scenario(jam: bool = False, length: float = 500.0) -> Scenario:
    return Scenario("small", small_route(jam, length), LeadSpec("none"), 0.0, 0.25, 0.0)


# toy pipeline: two training corridors, one benchmark corridor
TINY_CONFIG = """\
[pipeline]
seed = 0
[corpus]
variants =
scenario_files = tinyA.ini, tinyB.ini
budget = 4000
[grid]
soc_min = 0.24
soc_max = 0.26
[train]
hidden = 8, 8
epochs = 4
[benchmark]
routes = tinyC.ini
"""


def tiny_scenario(name, light_offset, jam_start, t0):
    route = Route(500.0, ((0.0, 12.0),), 10.0, (TrafficLight(250.0, 40.0, 20.0, light_offset),),
                  (TrafficJam(jam_start, 500.0, 0.0, 1e4, 100.0, 0.1, 20.0),))
    return Scenario(name, route, LeadSpec("dp", 0.97), 0.0, 0.25, t0)


@pytest.fixture(scope="session")
def small_solution():
    scn = small_scenario()
    prob = dp.build_problem(scn, grid=SMALL_GRID)
    vf, pol = dp.backward_induction(prob)
    return scn, prob, vf, pol


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
