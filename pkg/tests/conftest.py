import pytest


def pytest_configure(config):
    config._acceptance_lines = {}


@pytest.fixture
def criterion(request):
    """Record the one-line verdict for an acceptance criterion; returns the verdict."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        request.config._acceptance_lines[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config._acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
