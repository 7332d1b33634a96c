"""Shared PASS/FAIL record for the acceptance suite."""

RESULTS: dict[int, tuple[bool, str, str]] = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[number] = (bool(ok), title, detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}")
