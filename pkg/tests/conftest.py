ACCEPTANCE_RESULTS = []


def record_acceptance(number: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}"
    if detail:
        line += f": {detail}"
    ACCEPTANCE_RESULTS.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line)
