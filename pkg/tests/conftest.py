import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Collects one summary line per acceptance criterion."""
    def _record(criterion, passed, detail):
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
