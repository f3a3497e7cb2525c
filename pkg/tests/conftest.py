"""Acceptance bookkeeping: one pass/fail line per criterion in the terminal summary."""
import pytest

CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not rep.failed:
        return
    n = marker.args[0]
    entry = CRITERIA.setdefault(n, {"passed": True, "details": []})
    if rep.failed:
        entry["passed"] = False
    detail = getattr(item, "criterion_detail", None)
    if detail and detail not in entry["details"]:
        entry["details"].append(detail)


@pytest.fixture
def detail(request):
    """Attach a one-line summary of the measured quantities to the criterion line."""

    def _set(text: str):
        request.node.criterion_detail = text

    return _set


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        e = CRITERIA[n]
        status = "PASS" if e["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {'; '.join(e['details'])}")
