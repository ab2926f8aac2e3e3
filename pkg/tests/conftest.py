"""Collects the acceptance verdict lines into pytest's terminal summary."""

import re

VERDICT = re.compile(r"^(PASS|FAIL) criterion ")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) != "call":
                continue
            lines += [ln for ln in rep.capstdout.splitlines() if VERDICT.match(ln)]
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in lines:
            terminalreporter.write_line(ln)
