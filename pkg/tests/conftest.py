"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, seconds, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        line = f"[{number}] {status} {name} ({seconds:.2f} s)"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)
