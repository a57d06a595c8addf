"""Collects acceptance verdicts and repeats them at the end of the run."""

VERDICTS: list[str] = []


def record_verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
