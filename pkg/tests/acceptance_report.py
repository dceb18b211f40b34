"""Registry for the acceptance verdict lines.

Each acceptance test records exactly one line here; conftest prints the
collected lines in the terminal summary so they survive output capture.
"""

VERDICTS: list[str] = []


def record(num: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'} {title}"
    if detail:
        line += f" ({detail})"
    VERDICTS.append(line)
    print(line)
    return ok
