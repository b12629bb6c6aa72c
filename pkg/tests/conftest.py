import pytest

_lines = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_lines] = []
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number, reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""
    line = f"criterion {mark.args[0]:>2}: {'PASS' if rep.passed else 'FAIL'}  {detail}"
    item.config.stash[_lines].append((mark.args[0], line))
    # also shown inline, so a tee'd log carries the verdict next to the test
    item.config.get_terminal_writer().line("\n" + line)


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash[_lines])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
