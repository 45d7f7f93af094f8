import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "mass conservation",
    3: "loss identity",
    4: "metric oracles",
    5: "synthetic end-to-end recovery",
    6: "scalability ladder",
    7: "ablation ordering",
    8: "ensemble Jensen",
    9: "difficulty constants",
    10: "determinism",
    11: "format and geometry oracles",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or report.failed:
        _outcomes.setdefault(crit, []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        results = _outcomes.get(n)
        status = "NOT RUN" if results is None else ("PASS" if all(results) else "FAIL")
        terminalreporter.write_line(f"criterion {n:2d} ({name}): {status}")
