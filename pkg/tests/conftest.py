"""Shared pytest configuration: acceptance summary lines."""

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: numbered acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(report, "user_properties", []))
            if "criterion" not in props or report.when not in ("call", "setup"):
                continue
            if outcome == "passed" and report.when != "call":
                continue
            rows.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL",
                         props.get("detail", "")))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(rows, key=lambda r: (int(r[0].rstrip("ab")), r[0])):
        terminalreporter.write_line(f"criterion {number:>3}: {status}  {detail}")


@pytest.fixture
def criterion(record_property):
    """Tag a test with its criterion number and a one-line measured detail."""

    def tag(number, detail=""):
        record_property("criterion", str(number))
        record_property("detail", detail)

    return tag
