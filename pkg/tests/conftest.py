import time

import numpy as np
import pytest

SUITE_BUDGET_SECONDS = 600.0

_started = {}
_verdicts: list[tuple[int, str]] = []


def pytest_sessionstart(session):
    _started["t"] = time.perf_counter()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_verdicts, key=lambda v: v[0]):
            terminalreporter.write_line(line)
    # the whole suite, acceptance criteria included, has a wall-clock budget
    elapsed = time.perf_counter() - _started.get("t", time.perf_counter())
    verdict = "PASS" if elapsed < SUITE_BUDGET_SECONDS else "FAIL"
    terminalreporter.write_line(
        f"[acceptance 9] {verdict}: full suite took {elapsed:.1f}s (budget {SUITE_BUDGET_SECONDS:.0f}s)"
    )


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; returns ``passed`` for asserting."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"[acceptance {number}] {'PASS' if passed else 'FAIL'}: {detail}"
        print(line)
        _verdicts.append((number, line))
        return passed

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(0)
