"""Shared fixtures: verdict recording for the acceptance gate.

Acceptance tests report one [PASS]/[FAIL] line per criterion. The lines are
echoed in the terminal summary so they survive pytest's output capture.
"""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record a single acceptance verdict line."""

    def record(passed: bool, number: int, detail: str) -> None:
        tag = "PASS" if passed else "FAIL"
        line = f"[{tag}] criterion {number}: {detail}"
        _VERDICTS.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.line(line)
