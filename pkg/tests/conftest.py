"""Collects one pass/fail line per acceptance criterion and prints them after the run."""

import pytest

RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")
    config.stash[RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    title = (item.obj.__doc__ or item.name).strip().splitlines()[0]
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    item.config.stash[RESULTS][marker.args[0]] = (rep.passed, title, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, title, detail = results[n]
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'} - {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
