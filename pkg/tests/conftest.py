"""Prints one line per acceptance criterion at the end of the session."""

from __future__ import annotations


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" not in props or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            status = {"passed": "PASS", "skipped": "EXCLUDED"}.get(outcome, "FAIL")
            lines[props["criterion"]] = f"criterion {props['criterion']}: {status}  {props.get('detail', '')}".rstrip()
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines, key=lambda k: (int(k.split("(")[0]), k)):
            terminalreporter.write_line(lines[key])
