import os

import pytest

# single-threaded BLAS, as the runtime criterion assumes; set before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ.get("CRYSTAL_THREADS", "1"))

# filled by tests/test_acceptance.py; one (status, criterion, detail) per line
ACCEPTANCE_LINES: list[tuple[str, str, str]] = []


@pytest.fixture
def criterion():
    """Record a PASS/FAIL line for one acceptance criterion; printed in the terminal summary."""

    def report(name: str, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE_LINES.append(("PASS" if ok else "FAIL", name, detail))
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"[{status}] {name}: {detail}")
