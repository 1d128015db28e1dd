"""Shared pytest plumbing: collects acceptance verdict lines for the summary."""
_criterion_lines: list[str] = []


def record_criterion(number: int, label: str, ok: bool, detail: str) -> str:
    line = f"[{number:2d}] {'PASS' if ok else 'FAIL'}  {label}: {detail}"
    _criterion_lines.append(line)
    return line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criterion_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_criterion_lines):
        terminalreporter.write_line(line)
