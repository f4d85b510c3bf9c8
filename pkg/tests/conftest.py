import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion, printed in the terminal summary."""

    def report(criterion: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
