import re

import pytest
import torch

from screenlm.render import builtin_test_atlas

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def atlas():
    return builtin_test_atlas()


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        assert ok, f"criterion {number} ({title}) failed: {detail}"

    return record


def pytest_runtest_logreport(report):
    # a criterion that errors before recording still gets its FAIL line
    m = re.search(r"test_acceptance\.py::test_c(\d+)_", report.nodeid)
    if m and report.failed and int(m.group(1)) not in ACCEPTANCE_LINES:
        n = int(m.group(1))
        ACCEPTANCE_LINES[n] = f"criterion {n:>2} FAIL  error during {report.when}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
