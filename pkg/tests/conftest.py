"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_OUTCOMES: dict[int, tuple[str, str, list]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    if rep.when == "call" or failed:
        status = "FAIL" if failed else "PASS"
        prev = _OUTCOMES.get(number)
        if prev is None or prev[0] == "PASS":
            _OUTCOMES[number] = (status, title, list(item.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        status, title, props = _OUTCOMES[number]
        detail = ", ".join(f"{k}={v}" for k, v in props)
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
