"""Pass/fail lines recorded by the acceptance tests, printed at the end of the session."""

RESULTS: dict[str, tuple[bool, str]] = {}


def record(criterion: str, ok: bool, detail: str) -> str:
    RESULTS[criterion] = (ok, detail)
    line = format_line(criterion, ok, detail)
    print(line)
    return line


def format_line(criterion: str, ok: bool, detail: str) -> str:
    return f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
