import pytest

_RESULTS = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _RESULTS.append(("PASS" if rep.passed else "FAIL", mark.args[0], detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in _RESULTS:
        terminalreporter.write_line(f"{status} {name}" + (f" ({detail})" if detail else ""))
