"""Shared store for acceptance verdict lines (printed in the pytest summary)."""
LINES = []


def report(number, title, passed, detail):
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    LINES.append(line)
    print(line)
    return passed
