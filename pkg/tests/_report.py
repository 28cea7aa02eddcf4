"""Collects one result line per acceptance criterion for the terminal summary."""

RESULTS: dict[int, tuple[str, bool, str]] = {}


def record(number: int, title: str, passed: bool, detail: str) -> bool:
    RESULTS[number] = (title, bool(passed), detail)
    print(line(number))
    return bool(passed)


def line(number: int) -> str:
    title, passed, detail = RESULTS[number]
    return f"{'PASS' if passed else 'FAIL'} [{number:2d}] {title}: {detail}"
