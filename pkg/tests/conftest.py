import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for the criterion named by the test's marker.

    A test that raises before reporting is recorded as FAIL with the error.
    """
    number = request.node.get_closest_marker("criterion").args[0]
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def report(ok, detail):
        lines[number] = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(lines[number])
        assert ok, lines[number]

    yield report
    lines.setdefault(number, f"FAIL criterion {number}: raised before reporting")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
