import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from safeflow.cli import run_simulation  # noqa: E402
from safeflow.scenario import load_scenario  # noqa: E402
from safeflow.simulator import write_csv  # noqa: E402

ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail=""):
    line = f"CRITERION {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
    if detail:
        line += f"  [{detail}]"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


class _Run:
    def __init__(self, scenario, tmp_dir):
        self.scenario = scenario
        self.traj, self.target, self.monitors = run_simulation(scenario)
        self.csv = Path(tmp_dir) / f"{scenario.name}.csv"
        write_csv(self.traj, self.csv)


@pytest.fixture(scope="session")
def regulation_run(tmp_path_factory):
    """The bundled no-disturbance unicycle run, T = 200, dt = 1e-3."""
    return _Run(load_scenario("unicycle_regulation"), tmp_path_factory.mktemp("regulation"))


@pytest.fixture(scope="session")
def disturbed_run(tmp_path_factory):
    return _Run(load_scenario("unicycle_disturbed"), tmp_path_factory.mktemp("disturbed"))


@pytest.fixture(scope="session")
def half_dt_run(tmp_path_factory):
    sc = load_scenario("unicycle_regulation").with_overrides("sim", dt=5e-4, record_stride=200)
    return _Run(sc, tmp_path_factory.mktemp("half"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
