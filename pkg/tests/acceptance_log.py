"""Pass/fail lines collected by the acceptance suite and printed in the terminal summary."""

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    RESULTS[n] = (bool(ok), detail)
    print(f"ACCEPTANCE {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok
