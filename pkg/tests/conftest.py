"""Collects acceptance verdicts and prints them after the test session."""

VERDICTS = []


def record(criterion: int, title: str, passed: bool, detail: str) -> str:
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion:>2} ({title}): {detail}"
    VERDICTS.append((criterion, line))
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(VERDICTS):
        terminalreporter.write_line(line)
