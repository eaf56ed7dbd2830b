"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES = []


def report(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    print(line)
    LINES.append(line)
    return ok
