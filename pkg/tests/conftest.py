import numpy as np
import pytest

from odgen.graph import AreaSpatialCharacteristics, ODMatrix, RegionFeatures


def make_area(n=3, seed=0, area_id="a1", distances=None):
    rng = np.random.default_rng(seed)
    regions = tuple(
        RegionFeatures(
            f"r{i}",
            rng.uniform(0, 100, 97),
            rng.integers(0, 10, 36).astype(float),
            tuple(rng.uniform(0, 10, 2)),
        )
        for i in range(n)
    )
    return AreaSpatialCharacteristics(area_id, regions, distances)


def make_od(n=3, seed=0, density=0.7):
    rng = np.random.default_rng(seed + 1000)
    F = rng.uniform(0, 50, (n, n)) * (rng.uniform(size=(n, n)) < density)
    return ODMatrix(np.round(F, 3))


@pytest.fixture
def area3():
    return make_area(3)


@pytest.fixture
def fixture_dir(tmp_path):
    from odgen.data import save_area

    area = make_area(3)
    od = make_od(3)
    return save_area(tmp_path / "area_a1", area, od)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
