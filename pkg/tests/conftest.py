import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _, ok, notes = _RESULTS.get(number, (title, True, []))
    if report.when == "call":
        ok = ok and report.passed
        notes = notes + [f"{k}={v}" for k, v in report.user_properties]
    elif report.failed:
        ok = False
    _RESULTS[number] = (title, ok, notes)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, notes = _RESULTS[number]
        extra = f"  [{', '.join(notes)}]" if notes else ""
        terminalreporter.write_line(f"criterion {number:>2}  {'PASS' if ok else 'FAIL'}  {title}{extra}")
