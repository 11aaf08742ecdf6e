import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config._acceptance_lines = {}


@pytest.fixture
def criterion(request):
    """``check(ok, detail)`` records one PASS/FAIL line for this test's criterion, then asserts."""
    n = request.node.get_closest_marker("criterion").args[0]
    lines = request.config._acceptance_lines

    def check(ok, detail):
        lines[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[n])
        assert ok, lines[n]

    return check


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" or not rep.failed:
        return
    n = marker.args[0]
    lines = item.config._acceptance_lines
    if n not in lines:
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
        lines[n] = f"criterion {n:>2}: FAIL  {call.excinfo.typename if call.excinfo else ''}: {msg}"


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
