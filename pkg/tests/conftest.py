"""Collects acceptance outcomes and prints one verdict line per criterion."""

import pytest

_verdicts: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # Setup failures count too; an expected failure is still a FAIL line.
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _verdicts.setdefault(marker.args[0], []).append((item.name, report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        parts = _verdicts[n]
        ok = all(passed for _, passed, _ in parts)
        details = " | ".join(f"{name}: {d}" for name, _, d in parts if d)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {details}".rstrip())
