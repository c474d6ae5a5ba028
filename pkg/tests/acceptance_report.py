"""Collects one result line per acceptance criterion for the terminal summary."""

LINES = []


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
    LINES.append(line)
    print(line)
    assert ok, line
