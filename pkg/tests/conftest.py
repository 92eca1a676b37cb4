import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

sys.path.insert(0, str(Path(__file__).parent))

from risadapt.physics import FrequencyGrid  # noqa: E402
from risadapt.scene import default_scene  # noqa: E402
from risadapt.simulator import ChannelSimulator  # noqa: E402


@pytest.fixture(scope="session")
def desk_scene():
    return default_scene(7, "desk")


@pytest.fixture(scope="session")
def paper_scene():
    return default_scene(7, "paper")


@pytest.fixture(scope="session")
def grid():
    return FrequencyGrid.uniform()


@pytest.fixture(scope="session")
def small_grid():
    return FrequencyGrid.uniform(0.95, 1.05, 5, 1.0)


@pytest.fixture(scope="session")
def desk_sim(desk_scene, grid):
    return ChannelSimulator(desk_scene, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


@pytest.fixture
def acceptance_report(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def report(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
