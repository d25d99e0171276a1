import pytest

# one verdict line per acceptance criterion, printed after the run
VERDICTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records and prints the outcome, then asserts it."""

    def record(n: int, ok: bool, detail: str = ""):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        VERDICTS[n] = line
        print(line)
        assert ok, line

    return record
