"""Collects the one-line verdict of each acceptance criterion."""
LINES: list[str] = []


def report(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
    return ok
