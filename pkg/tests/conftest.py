"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""
import pytest

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = marker.args
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        if rep.failed and call.excinfo is not None:
            detail = (detail + "; " if detail else "") + f"error: {call.excinfo.exconly().splitlines()[0][:200]}"
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _CRITERIA[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} ({title}): {status}  [{detail}]")
