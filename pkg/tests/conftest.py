import re

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_results = {}


def pytest_runtest_makereport(item, call):
    m = _CRITERION.search(item.name)
    if not m or call.when != "call" and not (call.when == "setup" and call.excinfo is not None):
        return
    detail = dict(item.user_properties).get("detail", "")
    _results[int(m.group(1))] = (call.excinfo is None, item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        ok, name, detail = _results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {name}  {detail}")
