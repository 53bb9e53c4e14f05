import pytest

from tests.helpers import Signer

_criteria: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    n = report.user_properties and dict(report.user_properties).get("criterion")
    if n:
        _criteria.setdefault(n, []).append((report.nodeid, report.outcome))


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker and not any(k == "criterion" for k, _ in item.user_properties):
        item.user_properties.append(("criterion", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        results = _criteria[n]
        ok = all(outcome == "passed" for _, outcome in results)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({len(results)} checks)")


@pytest.fixture(scope="session")
def alice() -> Signer:
    return Signer.fixture("alice")


@pytest.fixture(scope="session")
def bob() -> Signer:
    return Signer.fixture("bob")
