"""Shared registry for the acceptance suite's per-criterion verdict lines.

tests/test_acceptance.py records one entry per criterion; the
pytest_terminal_summary hook in conftest.py prints them at the end of the
run so the verdicts are visible in a plain ``pytest -v`` invocation.
"""

from __future__ import annotations

_RESULTS: list[tuple[int, str, bool, str]] = []


def record(num: int, name: str, passed: bool, detail: str = "") -> bool:
    """Store a criterion verdict; returns ``passed`` for use in asserts."""
    _RESULTS.append((num, name, passed, detail))
    return passed


def lines() -> list[str]:
    out = []
    for num, name, passed, detail in sorted(_RESULTS):
        verdict = "PASS" if passed else "FAIL"
        suffix = f"  ({detail})" if detail else ""
        out.append(f"ACCEPTANCE {num:2d} {name}: {verdict}{suffix}")
    return out


def reset() -> None:
    _RESULTS.clear()
