import numpy as np
import pytest

from fairnb.cohort import Cohort

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    num = getattr(report, "criterion", None)
    if num is None:
        return
    prev = _CRITERIA.get(num[0])
    ok = report.outcome == "passed"
    if prev is None or prev[1]:
        _CRITERIA[num[0]] = (num[1], ok and (prev is None or prev[1]))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        rep.criterion = (mark.args[0], mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, ok = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_cohort(times, events, groups=None, features=None, horizon=10.0):
    n = len(times)
    groups = ["A"] * n if groups is None else list(groups)
    feats = np.zeros((n, 1)) if features is None else np.asarray(features, float)
    return Cohort(ids=[f"i{k}" for k in range(n)], group=groups, features=feats, time=times,
                  event=events, groups=tuple(sorted(set(groups))), horizon=horizon)
