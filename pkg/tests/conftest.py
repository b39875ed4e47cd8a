# one PASS/FAIL line per acceptance criterion, printed after the run
RESULTS: dict = {}


def record(number: int, passed: bool, detail: str) -> None:
    """Store a sub-check; a criterion passes only if all its sub-checks do."""
    ok, parts = RESULTS.get(number, (True, []))
    RESULTS[number] = (ok and bool(passed), parts + [detail])


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, parts = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  " + "; ".join(parts))
