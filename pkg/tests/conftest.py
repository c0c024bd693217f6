"""Repeat acceptance verdict lines in the terminal summary, even when output is captured."""

VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
