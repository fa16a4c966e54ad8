"""Prints the acceptance checklist collected by test_acceptance.py (if it ran)
at the end of the terminal summary, so every run log carries one PASS/FAIL
line per acceptance check."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "CHECKLIST", None) if mod else None
    if lines:
        terminalreporter.section("acceptance checklist")
        for line in lines:
            terminalreporter.write_line(line)
