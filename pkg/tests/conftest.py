"""Shared pytest hooks.

The acceptance tests double as a checklist; after the run each criterion
gets its own PASS/FAIL line so the summary is scannable without reading
the full pytest output.
"""

_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _acceptance[name] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and not report.passed:
        _acceptance[name] = "SKIP" if report.skipped else "FAIL"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        label = name.removeprefix("test_").replace("_", " ")
        terminalreporter.write_line(f"[acceptance] {label}: {_acceptance[name]}")
