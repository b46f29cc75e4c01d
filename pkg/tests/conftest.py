import pytest

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and asserts ``ok``."""

    def check(n, ok, detail):
        _ACCEPTANCE[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}"
        print(_ACCEPTANCE[n])
        assert ok, detail

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
