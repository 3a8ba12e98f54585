"""Collects acceptance-criterion outcomes and prints one line per criterion."""

_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _ACCEPTANCE[report.nodeid.split("::")[-1]] = outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{_ACCEPTANCE[name]:4s} {name}")
