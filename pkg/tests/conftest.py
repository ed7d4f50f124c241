import pytest

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record a one-line acceptance verdict; echoed again in the terminal summary."""

    def report(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
        print(line)
        _CRITERIA.append((number, line))
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA):
        terminalreporter.write_line(line)
