import pytest

_ACCEPTANCE = []


@pytest.fixture()
def verdict():
    """Record one acceptance line; printed together at the end of the session."""

    def record(number, ok, detail):
        status = "PASS" if ok is True else "FAIL" if ok is False else ok
        line = f"[{status}] criterion {number}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)
