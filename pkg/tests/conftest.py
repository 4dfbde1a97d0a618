import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(Path(__file__).resolve().parent))


@pytest.fixture
def demo_dir():
    return ROOT / "demo"


@pytest.fixture
def golden_dir():
    return Path(__file__).resolve().parent / "golden"


_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        number = int(report.nodeid.split("test_criterion_")[1][:2])
        if _CRITERIA.get(number) != "FAIL":
            _CRITERIA[number] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number:2d}: {_CRITERIA[number]}")
