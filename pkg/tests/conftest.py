import pytest

TITLES = {
    1: "gradient correctness",
    2: "change-of-variables soundness",
    3: "calibration arithmetic and CI coverage",
    4: "two-layer gradient bound",
    5: "reconstruction soundness",
    6: "privacy-utility trend",
    7: "defense ordering",
    8: "Adult desk-scale anchor",
    9: "protocol golden bytes and loopback",
    10: "determinism",
}

_outcomes: dict[int, str] = {}
_details: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def detail(request):
    """Append a short measurement line shown next to the criterion verdict."""
    m = request.node.get_closest_marker("criterion")
    n = m.args[0] if m else 0
    return lambda text: _details.setdefault(n, []).append(str(text))


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    m = [k for k in report.keywords if k.startswith("criterion_")]
    if not m:
        return
    n = int(m[0].split("_")[1])
    ok = report.passed
    prev = _outcomes.get(n, "PASS")
    _outcomes[n] = "PASS" if (ok and prev == "PASS") else "FAIL"


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m:
            item.keywords[f"criterion_{m.args[0]}"] = True


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(TITLES):
        if n not in _outcomes:
            continue
        line = f"criterion {n:2d} {_outcomes[n]}: {TITLES[n]}"
        if _details.get(n):
            line += " | " + "; ".join(_details[n])
        tr.write_line(line)
