import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    n, title = crit
    detail = dict(report.user_properties).get("detail", "")
    failed = report.failed or (report.when == "call" and report.skipped)
    prev = _CRITERIA.get(n)
    if report.when == "call" or failed:
        if prev is None or prev[1] == "PASS":
            _CRITERIA[n] = (title, "FAIL" if failed else "PASS", detail)


@pytest.fixture(autouse=True)
def _criterion_properties(request):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        request.node.user_properties.append(("criterion", tuple(m.args)))


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the criterion summary."""
    def put(text):
        request.node.user_properties.append(("detail", text))
    return put


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n:>2} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
