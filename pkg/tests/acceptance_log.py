"""Collects one verdict line per acceptance criterion for the terminal summary."""

from __future__ import annotations

RESULTS: dict[int, str] = {}


def record(number: int, ok: bool | None, detail: str) -> str:
    verdict = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"criterion {number}: {verdict}  {detail}"
    RESULTS[number] = line
    print(line)
    return line
