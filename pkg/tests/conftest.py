import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[int, tuple[str, bool, list]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, name = marker.args
    if rep.when == "call" or (rep.failed and n not in _criteria):
        _criteria[n] = (name, rep.passed, list(item.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        name, ok, props = _criteria[n]
        detail = " ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
