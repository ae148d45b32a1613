import pytest

from ridepool.road_network import RoadNetwork, cluster_intersections, generate_grid_city

_REPORT_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_REPORT_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record one pass/fail line for an acceptance criterion."""
    lines = request.config.stash[_REPORT_KEY]

    def emit(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)

    return emit


@pytest.fixture(scope="session")
def grid6():
    return generate_grid_city(6, 6, 60, seed=3)


@pytest.fixture(scope="session")
def grid6_clusters(grid6):
    return cluster_intersections(grid6, 4, seed=0)


@pytest.fixture
def line_net():
    # 0 - 1 - 2 - 3, 60 s per edge both ways
    edges = {}
    for u in range(3):
        edges[(u, u + 1)] = edges[(u + 1, u)] = 60.0
    return RoadNetwork((0, 1, 2, 3), edges)


@pytest.fixture(scope="session")
def toy():
    """Small city, fleet and demand model shared by the simulation tests."""
    from ridepool.experiments import DemandModel, build_scenario
    from ridepool.simulator import SimConfig

    config = SimConfig(fleet_size=5, K=4, horizon=10, tau=120.0, capacity=3)
    scenario, sampler = build_scenario(4, 4, config, DemandModel(base_rate=3, peak_rate=6), city_seed=1,
                                       stats_paths=8)
    return config, scenario, sampler
