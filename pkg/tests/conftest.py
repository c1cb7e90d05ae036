"""Collects one verdict line per acceptance criterion and prints them at the end."""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(name: str, ok: bool, detail: str, check: bool = True) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {name}: {detail}"
        _VERDICTS.append(line)
        print(line)
        if check:
            assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
