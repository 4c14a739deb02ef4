"""Shared pytest hooks: the acceptance module records one verdict per criterion."""

CRITERIA: dict = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
