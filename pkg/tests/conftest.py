import pytest

CRITERIA = {
    1: "zero-radius bound equals empirical CVaR",
    2: "lower/upper bound bracket",
    3: "safety set containments",
    4: "20-iteration experiment, all variants",
    5: "per-step solve time ordering",
    6: "iteration cost trend",
    7: "safe-set mechanics",
    8: "conic solver unit suite",
    9: "byte-identical outputs",
}

_outcomes: dict[int, list[bool]] = {}
_notes: dict[int, list[str]] = {}


@pytest.fixture
def note(request):
    """Attach a short measurement to the test's acceptance criterion."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        if marker is not None:
            _notes.setdefault(marker.args[0], []).append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(marker.args[0], []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        line = f"criterion {n}: {status}  {title}"
        if _notes.get(n):
            line += "  [" + "; ".join(_notes[n]) + "]"
        terminalreporter.write_line(line)
