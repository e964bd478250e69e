"""Shared fixtures and acceptance-line reporting."""

import numpy as np
import pytest

_acceptance_results = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        _acceptance_results.append((name, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, passed in _acceptance_results:
        terminalreporter.write_line(f"{name}: {'PASS' if passed else 'FAIL'}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
