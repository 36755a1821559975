"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_OUTCOMES: dict[int, tuple[str, str]] = {}


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
    prior = _OUTCOMES.get(number, ("PASS", title))[0]
    if report.skipped:
        verdict = "SKIP" if prior != "FAIL" else "FAIL"
    elif report.failed:
        verdict = "FAIL"
    elif report.when == "call":
        verdict = prior if prior == "FAIL" else "PASS"
    else:
        return
    _OUTCOMES[number] = (verdict, title)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        verdict, title = _OUTCOMES[number]
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title}")
