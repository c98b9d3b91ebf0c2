"""Collects one verdict line per acceptance criterion and prints them at the end of the run."""

VERDICTS: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    VERDICTS.append(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
