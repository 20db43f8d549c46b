import pytest

from trafcal.network import Edge, Junction, RoadNetwork, grid_network

# lines collected by test_acceptance and echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def grid3():
    """3x3 junctions, 12 two-way streets of 100 m at 10 m/s."""
    return grid_network(2, 2, block=100.0, speed=10.0)


def line_network(lengths, speed=10.0, lanes=1):
    """Chain a0 -> a1 -> ... with one edge per length, ids e0, e1, ..."""
    js = [Junction(f"a{k}", 100.0 * k, 0.0) for k in range(len(lengths) + 1)]
    es = [Edge(f"e{k}", f"a{k}", f"a{k + 1}", float(l), speed, lanes)
          for k, l in enumerate(lengths)]
    return RoadNetwork(js, es)


@pytest.fixture
def chain():
    return line_network
