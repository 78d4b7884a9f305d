from __future__ import annotations

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the terminal summary."""

    def add(number: int, name: str, ok: bool, detail: str, seconds: float, limit: float):
        ok = ok and seconds < limit
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} {name}: {detail} [{seconds:.2f}s / {limit:.0f}s]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
