"""Shared pytest wiring for the acceptance suite's verdict lines."""

import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Mutable list the acceptance checks append their verdict lines to."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    # repeat the one-line verdicts after the test report so they are
    # visible even when stdout capture is on
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance summary")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
