"""Collects acceptance verdicts and prints them once at the end of the run."""

ACCEPTANCE: dict[int, str] = {}


def record(number: int, title: str, passed: bool, detail: str, seconds: float, budget: float) -> bool:
    ok = passed and seconds <= budget
    verdict = "PASS" if ok else "FAIL"
    ACCEPTANCE[number] = f"criterion {number:2d} [{verdict}] {title}: {detail} ({seconds:.1f}s of {budget:g}s)"
    print(ACCEPTANCE[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
