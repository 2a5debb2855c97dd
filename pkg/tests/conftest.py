import pytest

CRITERIA: dict = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> None:
    CRITERIA[number] = (title, passed, detail)


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, passed, detail = CRITERIA[n]
        line = f"criterion {n} [{'PASS' if passed else 'FAIL'}] {title}"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
