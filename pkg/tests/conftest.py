import pytest

_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one acceptance line: ``report(number, name, passed, detail)``."""

    def _add(number, name, passed, detail=""):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed

    return _add


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)
