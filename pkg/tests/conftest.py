import numpy as np
import pytest

_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.addinivalue_line("markers", "slow: long-running end-to-end test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        if hasattr(rep, "wasxfail"):
            # a known shortfall stays red in the summary even though the run is green
            status = "FAIL (xfail)" if rep.skipped else "PASS (unexpected)"
        else:
            status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        prev = _RESULTS.get(number)
        if prev is None or prev[1] == "PASS":
            _RESULTS[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2} [{status}] {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
