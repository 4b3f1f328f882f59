"""Shared pytest plumbing.

The acceptance tests register one verdict line per criterion; the terminal
summary hook prints them after the run so they are visible even when pytest
captures stdout.
"""

from __future__ import annotations

import pytest

CRITERION_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    CRITERION_LINES.append(f"{name}: {'PASS' if passed else 'FAIL'} ({detail})")


@pytest.fixture(scope="session")
def criteria():
    """Recorder for per-criterion verdict lines shown in the summary."""
    return record_criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in CRITERION_LINES:
        terminalreporter.write_line(line)
