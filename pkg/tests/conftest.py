"""Collects one verdict line per acceptance criterion and prints them after
the run, so they show up in the normal pytest output."""

import pytest

VERDICTS = []


@pytest.fixture
def verdict():
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        VERDICTS.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
