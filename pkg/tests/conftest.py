"""Shared pytest plumbing: the acceptance verdict board.

Acceptance tests record one verdict line each; the lines are replayed after
the normal summary so they are visible without -s.
"""

VERDICTS: list[str] = []


def record(line: str) -> None:
    VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not VERDICTS:
        return
    terminalreporter.write_sep("-", "acceptance")
    for line in VERDICTS:
        terminalreporter.write_line(line)
