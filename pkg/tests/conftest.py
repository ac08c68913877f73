import pytest

_results: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "call" or number not in _results:
        _results[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, title, detail = _results[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}" + (f"  [{detail}]" if detail else ""))
