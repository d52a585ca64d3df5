import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dronenet.solve.runner import SolverConfig  # noqa: E402


@pytest.fixture
def solver(tmp_path):
    return SolverConfig(time_limit_s=120, work_dir=str(tmp_path / "runs"))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
