"""Collects per-criterion outcomes so the run ends with one line per criterion."""

from collections import defaultdict

_parts: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)


def record(criterion: int, part: str, ok: bool, detail: str) -> bool:
    _parts[criterion].append((part, bool(ok), detail))
    print(f"criterion {criterion}{part}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)


def summary_lines() -> list[str]:
    out = []
    for n in sorted(_parts):
        parts = _parts[n]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p or '-'} {'ok' if ok else 'FAIL'}: {d}" for p, ok, d in parts)
        out.append(f"criterion {n}: {verdict}  {detail}")
    return out
