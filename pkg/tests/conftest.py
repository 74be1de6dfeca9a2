"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

ACCEPTANCE_FILE = "test_acceptance.py"


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if ACCEPTANCE_FILE not in getattr(report, "nodeid", "") or report.when != "call" and outcome != "error":
                continue
            detail = next((content for name, content in report.user_properties if name == "detail"), "")
            lines.append((report.nodeid.split("::")[-1], "PASS" if outcome == "passed" else "FAIL", detail))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in sorted(lines):
        terminalreporter.write_line(f"{status}  {name}  {detail}")
