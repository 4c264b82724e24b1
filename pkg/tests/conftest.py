import pytest

from adaptune.modelcore import SeededRng

# one line per acceptance criterion, filled in by test_acceptance.py
CRITERIA_LINES = {}


@pytest.fixture
def rng():
    return SeededRng(1234)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA_LINES):
            terminalreporter.write_line(CRITERIA_LINES[key])
