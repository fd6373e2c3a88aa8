import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

_criteria: dict[str, dict] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    number = getattr(item.function, "criterion", None)
    if number is None:
        return
    entry = _criteria.setdefault(item.nodeid, {"number": number, "title": item.function.title,
                                               "outcome": "PASS", "detail": ""})
    if report.failed:
        entry["outcome"] = "FAIL"
    elif hasattr(report, "wasxfail"):
        # known shortfall: still reported as a failure, without failing the run
        entry["outcome"] = "FAIL" if report.skipped else "PASS"
        entry["known"] = report.skipped
    elif report.skipped and report.when != "teardown":
        entry["outcome"] = "SKIP"
    for key, value in item.user_properties:
        if key == "detail":
            entry["detail"] = value


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(_criteria.values(), key=lambda e: e["number"]):
        outcome = entry["outcome"]
        if entry.get("declared") or entry["title"].startswith("declared"):
            outcome = "DECLARED" if outcome == "PASS" else outcome
        line = f"criterion {entry['number']:2d} {outcome:8s} {entry['title']}"
        if entry["detail"]:
            line += f" | {entry['detail']}"
        if entry.get("known"):
            line += " (known shortfall, marked xfail)"
        terminalreporter.write_line(line)
