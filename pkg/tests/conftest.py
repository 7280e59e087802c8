"""Prints one line per acceptance criterion at the end of the run."""

_acceptance: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        measured = dict(report.user_properties).get("measured", "")
        name = report.nodeid.split("::")[-1]
        _acceptance.append((name, report.outcome.upper(), measured))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, measured in _acceptance:
        terminalreporter.write_line(f"{outcome:7s} {name}  {measured}")
