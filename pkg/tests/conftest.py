import pytest

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    failed = report.failed or (report.when == "call" and report.skipped)
    prev = _outcomes.get(number, (title, "PASS"))[1]
    if report.when == "call" or failed:
        _outcomes[number] = (title, "FAIL" if failed or prev == "FAIL" else "PASS")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        title, status = _outcomes[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")
