import pytest

_ACCEPTANCE = []


@pytest.fixture
def acceptance(request):
    """Record one acceptance line: ``acceptance(ok, detail)``; the test fails if ok is false."""

    def record(ok, detail, elapsed=None):
        _ACCEPTANCE.append((request.node.name, bool(ok), detail, elapsed))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail, elapsed in _ACCEPTANCE:
        t = "" if elapsed is None else f" [{elapsed:.1f}s]"
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}{t}")
