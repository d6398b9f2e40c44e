"""Text formats: RTTM, trial lists and flat key=value config files."""

from __future__ import annotations

import dataclasses
import enum
import typing
from pathlib import Path
from typing import Mapping, Sequence, Union

from .core import (
    UNKNOWN,
    InvalidArgument,
    ParseError,
    ReferenceAnnotation,
    ReferenceEntry,
    TimeInterval,
    merge_intervals,
)
from .metrics import TrialScore

RTTM_UNKNOWN = "UNK"
NA = "<NA>"

Hypothesis = Sequence[tuple[TimeInterval, str]]


def parse_rttm(path) -> dict[str, ReferenceAnnotation]:
    """Read SPEAKER lines into one annotation per file id.

    Other line types are ignored. Overlapping or touching turns of the same
    speaker are fused, and each recording's duration is its last end time.
    """
    turns: dict[str, list[tuple[float, float, str]]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        f = line.split()
        if not f or f[0] != "SPEAKER":
            continue
        if len(f) < 8:
            raise ParseError(f"SPEAKER line needs >= 8 fields, got {len(f)}", lineno)
        try:
            tbeg, tdur = float(f[3]), float(f[4])
        except ValueError:
            raise ParseError(f"bad onset/duration {f[3]!r} {f[4]!r}", lineno) from None
        if tdur <= 0:
            raise InvalidArgument(f"line {lineno}: duration must be positive, got {tdur}")
        if tbeg < 0:
            raise InvalidArgument(f"line {lineno}: negative onset {tbeg}")
        spk = UNKNOWN if f[7] == RTTM_UNKNOWN else f[7]
        turns.setdefault(f[1], []).append((tbeg, tbeg + tdur, spk))
    out = {}
    for rec, items in turns.items():
        per_spk: dict[str, list[TimeInterval]] = {}
        for s, e, spk in items:
            per_spk.setdefault(spk, []).append(TimeInterval(s, e))
        entries = tuple(ReferenceEntry(iv, spk) for spk, ivs in per_spk.items()
                        for iv in merge_intervals(ivs))
        out[rec] = ReferenceAnnotation(rec, entries, max(e for _, e, _ in items))
    return out


def _rows(item: Union[ReferenceAnnotation, Hypothesis]) -> list[tuple[float, float, str]]:
    if isinstance(item, ReferenceAnnotation):
        return [(e.interval.start, e.interval.end, e.speaker) for e in item.entries]
    return [(iv.start, iv.end, lab) for iv, lab in item]


def write_rttm(items: Mapping[str, Union[ReferenceAnnotation, Hypothesis]], path) -> None:
    """Write annotations or hypotheses (keyed by recording id) as RTTM."""
    lines = []
    for rec in sorted(items):
        for s, e, spk in sorted(_rows(items[rec]), key=lambda r: (r[0], r[2])):
            name = RTTM_UNKNOWN if spk == UNKNOWN else spk
            lines.append(f"SPEAKER {rec} 1 {s:.2f} {e - s:.2f} {NA} {NA} {name} {NA} {NA}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def write_trials(trials: Sequence[TrialScore], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trials:
            kind = "target" if t.is_target else "nontarget"
            fh.write(f"{t.recording} {t.index} {t.speaker} {t.score!r} {kind}\n")


def read_trials(path) -> list[TrialScore]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        f = line.split()
        if not f or f[0].startswith("#"):
            continue
        if len(f) != 5 or f[4] not in ("target", "nontarget"):
            raise ParseError("expected: recording index speaker score target|nontarget", lineno)
        try:
            out.append(TrialScore(f[0], int(f[1]), f[2], float(f[3]), f[4] == "target"))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    return out


# flat key=value config files

def read_config(path) -> dict[str, str]:
    """``key=value`` per line; ``#`` starts a comment; later keys win."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key=value", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno)
        out[key] = value
    return out


def _coerce(raw: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is Union:
        for arg in args:
            if arg is type(None):
                if raw.lower() in ("none", ""):
                    return None
                continue
            try:
                return _coerce(raw, arg)
            except (ValueError, TypeError):
                continue
        raise ValueError(f"cannot parse {raw!r}")
    if origin in (tuple, list):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values, got {raw!r}")
            return tuple(_coerce(p, a) for p, a in zip(parts, args))
        elem = args[0] if args else str
        vals = [_coerce(p, elem) for p in parts]
        return tuple(vals) if origin is tuple else vals
    if hint is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        try:
            return hint(raw.lower())
        except ValueError:
            return hint[raw.upper()]
    if hint in (int, float, str):
        return hint(raw)
    raise TypeError(f"unsupported config type {hint!r}")


def apply_overrides(obj, values: Mapping[str, str], prefix: str = ""):
    """Return a copy of dataclass ``obj`` with dotted keys under ``prefix`` applied.

    Nested dataclass fields take ``prefix.field.sub`` keys. Keys that match no
    field raise ``InvalidArgument`` so typos do not pass silently.
    """
    hints = typing.get_type_hints(type(obj))
    changes = {}
    used = set()
    for f in dataclasses.fields(obj):
        key = f"{prefix}{f.name}"
        current = getattr(obj, f.name)
        if dataclasses.is_dataclass(current):
            sub = {k: v for k, v in values.items() if k.startswith(key + ".")}
            if sub:
                changes[f.name] = apply_overrides(current, sub, key + ".")
                used.update(sub)
        elif key in values:
            try:
                changes[f.name] = _coerce(values[key], hints[f.name])
            except (ValueError, TypeError, KeyError) as exc:
                raise InvalidArgument(f"{key}: {exc}") from None
            used.add(key)
    unknown = sorted(k for k in values if k.startswith(prefix) and k not in used)
    if unknown:
        raise InvalidArgument(f"unknown config keys: {', '.join(unknown)}")
    return dataclasses.replace(obj, **changes) if changes else obj


def write_report(values: Mapping[str, object], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in values.items():
            fh.write(f"{key}={value}\n")
