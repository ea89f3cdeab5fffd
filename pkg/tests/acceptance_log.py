"""Collects one PASS/FAIL line per acceptance criterion for the run summary."""

import sys

LINES = []


def report(number, ok, detail, elapsed, budget):
    within = elapsed < budget
    status = "PASS" if ok and within else "FAIL"
    line = f"{status} criterion {number:2d}: {detail} [{elapsed:.1f} s, budget {budget:g} s]"
    LINES.append(line)
    print(line, file=sys.stderr)
    return ok and within
