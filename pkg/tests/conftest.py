import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    passed = _RESULTS.get(item.nodeid, (number, title, True))[2]
    if report.when == "call" or report.failed:
        passed = passed and report.passed
        _RESULTS[item.nodeid] = (number, title, passed)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    by_number = {}
    for number, title, passed in _RESULTS.values():
        prev = by_number.get(number, (title, True))
        by_number[number] = (title, prev[1] and passed)
    for number in sorted(by_number):
        title, passed = by_number[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}")
