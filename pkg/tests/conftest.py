import sys

import numpy as np
import pytest

from binfda import diagnostics


@pytest.fixture(autouse=True)
def _clean_diagnostics():
    diagnostics.reset()
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_acceptance_ran = set()


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py::test_" in report.nodeid:
        _acceptance_ran.add(int(report.nodeid.split("::test_")[1][:2]))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance check that was run."""
    module = sys.modules.get("test_acceptance")
    if module is None or not _acceptance_ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance_ran):
        terminalreporter.write_line(module.RESULTS.get(n, f"FAIL [{n:2d}] raised before a verdict"))
