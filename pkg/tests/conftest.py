import pytest

# criterion number -> (title, [(test name, phase passed, seconds)])
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    # setup time counts too: the synthetic study runs inside a fixture
    n, title = mark.args
    _CRITERIA.setdefault(n, (title, []))[1].append((item.name, rep.passed, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, runs = _CRITERIA[n]
        ok = all(passed for _, passed, _ in runs)
        secs = sum(d for _, _, d in runs)
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  ({secs:.1f}s)")
