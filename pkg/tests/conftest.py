import pytest

CRITERIA: dict[int, str] = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> None:
    """Remember one acceptance line; printed in the terminal summary."""
    status = "PASS" if passed else "FAIL"
    CRITERIA[number] = f"criterion {number:2d} {status}  {title}" + (f"  [{detail}]" if detail else "")
    print(CRITERIA[number])


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[k])
