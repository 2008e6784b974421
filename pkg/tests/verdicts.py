"""Collects one PASS/FAIL line per acceptance criterion for the end-of-run summary."""

RESULTS: dict[int, tuple[bool, str]] = {}


def verdict(number: int, ok: bool, detail: str) -> None:
    RESULTS[number] = (bool(ok), detail)
    print(line(number))
    assert ok, f"criterion {number}: {detail}"


def line(number: int) -> str:
    ok, detail = RESULTS[number]
    return f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
