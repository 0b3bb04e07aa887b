import re

ACCEPTANCE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(outcome, []):
            match = ACCEPTANCE.search(getattr(report, "nodeid", ""))
            if not match or (report.when != "call" and outcome == "passed"):
                continue
            detail = "; ".join(f"{k}={v}" for k, v in getattr(report, "user_properties", []))
            status = "PASS" if outcome == "passed" else "FAIL"
            lines[int(match.group(1))] = f"criterion {match.group(1)}: {status}" + (f"  ({detail})" if detail else "")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
