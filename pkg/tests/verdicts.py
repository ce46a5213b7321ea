"""Shared record of acceptance verdicts, printed at the end of the session."""

VERDICTS: dict[int, tuple[bool, str, str]] = {}


def record(number: int, title: str, passed: bool, detail: str) -> None:
    VERDICTS[number] = (passed, title, detail)
    print(line(number))


def line(number: int) -> str:
    passed, title, detail = VERDICTS[number]
    return f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
