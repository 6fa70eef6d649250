"""Collects acceptance checks and prints one PASS/FAIL line per criterion."""

from collections import defaultdict

import pytest

_CHECKS: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)


class Recorder:
    def __init__(self, criterion: int):
        self.criterion = criterion

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        _CHECKS[self.criterion].append((name, bool(ok), detail))
        return bool(ok)


@pytest.fixture
def criterion():
    return Recorder


def pytest_terminal_summary(terminalreporter):
    if not _CHECKS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CHECKS):
        checks = _CHECKS[number]
        status = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}")
        for name, ok, detail in checks:
            mark = "ok  " if ok else "FAIL"
            terminalreporter.write_line(f"    [{mark}] {name}" + (f"  ({detail})" if detail else ""))
