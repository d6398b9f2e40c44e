"""Domain types and timeline algebra shared across the pipeline.

All times are seconds. Intervals are half-open ``[start, end)`` and every
comparison between time values uses an absolute tolerance of ``TIME_EPS``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TIME_EPS = 1e-9
UNKNOWN = "UNKNOWN"


class TrackforgeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(TrackforgeError, ValueError):
    pass


class DimensionMismatch(TrackforgeError, ValueError):
    pass


class ParseError(TrackforgeError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownSpeaker(TrackforgeError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown speaker"


@dataclass(frozen=True, order=True)
class TimeInterval:
    start: float
    end: float

    def __post_init__(self):
        if not (np.isfinite(self.start) and np.isfinite(self.end)):
            raise InvalidArgument(f"non-finite interval [{self.start}, {self.end})")
        if self.start < -TIME_EPS:
            raise InvalidArgument(f"interval starts before 0: {self.start}")
        if self.end - self.start <= TIME_EPS:
            raise InvalidArgument(f"empty interval [{self.start}, {self.end})")

    def duration(self) -> float:
        return self.end - self.start

    def shifted(self, offset: float) -> "TimeInterval":
        return TimeInterval(self.start + offset, self.end + offset)

    def __repr__(self) -> str:
        return f"[{self.start:g}, {self.end:g})"


@dataclass(frozen=True)
class ReferenceEntry:
    interval: TimeInterval
    speaker: str

    def __post_init__(self):
        if not self.speaker:
            raise InvalidArgument("speaker id must be non-empty")


@dataclass(frozen=True)
class ReferenceAnnotation:
    recording_id: str
    entries: tuple[ReferenceEntry, ...]
    duration: float

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(sorted(
            self.entries, key=lambda e: (e.interval.start, e.interval.end, e.speaker))))
        for e in self.entries:
            if e.interval.end > self.duration + TIME_EPS:
                raise InvalidArgument(
                    f"{self.recording_id}: entry {e.interval!r} exceeds duration {self.duration}")
        for spk, ivs in self.by_speaker().items():
            for a, b in zip(ivs, ivs[1:]):
                if b.start < a.end - TIME_EPS:
                    raise InvalidArgument(
                        f"{self.recording_id}: speaker {spk} overlaps itself at {a!r}/{b!r}")

    def speakers(self) -> list[str]:
        """Speaker ids in order of first appearance."""
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.speaker, None)
        return list(seen)

    def by_speaker(self) -> dict[str, list[TimeInterval]]:
        out: dict[str, list[TimeInterval]] = {}
        for e in self.entries:
            out.setdefault(e.speaker, []).append(e.interval)
        return out

    def restricted_to(self, speakers: Iterable[str]) -> "ReferenceAnnotation":
        keep = set(speakers)
        return ReferenceAnnotation(
            self.recording_id, tuple(e for e in self.entries if e.speaker in keep), self.duration)


@dataclass(frozen=True, eq=False)
class EmbeddingSegment:
    index: int
    interval: TimeInterval
    vector: np.ndarray
    truth: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        vec = np.array(self.vector, dtype=float)
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise InvalidArgument(f"segment {self.index}: vector must be 1-D and finite")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "truth", frozenset(self.truth))
        if self.index < 0:
            raise InvalidArgument("segment index must be non-negative")

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass(frozen=True, eq=False)
class SpeakerModel:
    speaker: str
    vector: np.ndarray
    source_count: int
    window: TimeInterval

    def __post_init__(self):
        vec = np.array(self.vector, dtype=float)
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise InvalidArgument(f"model {self.speaker}: vector must be 1-D and finite")
        if self.source_count < 1:
            raise InvalidArgument("source_count must be >= 1")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True, eq=False)
class ModelBank:
    models: tuple[SpeakerModel, ...]

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if not self.models:
            raise InvalidArgument("a model bank needs at least one model")
        ids = [m.speaker for m in self.models]
        if len(set(ids)) != len(ids):
            raise InvalidArgument(f"duplicate speaker ids in bank: {ids}")
        dims = {m.vector.shape[0] for m in self.models}
        if len(dims) != 1:
            raise DimensionMismatch(f"bank models have differing dimensions {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.models)

    @property
    def speakers(self) -> list[str]:
        return [m.speaker for m in self.models]

    @property
    def dim(self) -> int:
        return self.models[0].vector.shape[0]

    def matrix(self) -> np.ndarray:
        """Model vectors stacked as an ``(S, b)`` array in bank order."""
        return np.stack([m.vector for m in self.models])


@dataclass(frozen=True)
class LabeledSegment:
    index: int
    interval: TimeInterval
    label: str
    scores: tuple[float, ...]

    def with_label(self, label: str) -> "LabeledSegment":
        return LabeledSegment(self.index, self.interval, label, self.scores)


def interval_intersection(a: TimeInterval, b: TimeInterval) -> float:
    return max(0.0, min(a.end, b.end) - max(a.start, b.start))


def merge_intervals(intervals: Iterable[TimeInterval]) -> list[TimeInterval]:
    """Union of intervals as a sorted list of disjoint intervals.

    Intervals that touch (within ``TIME_EPS``) are fused.
    """
    ivs = sorted(intervals, key=lambda iv: (iv.start, iv.end))
    out: list[list[float]] = []
    for iv in ivs:
        if out and iv.start <= out[-1][1] + TIME_EPS:
            out[-1][1] = max(out[-1][1], iv.end)
        else:
            out.append([iv.start, iv.end])
    return [TimeInterval(s, e) for s, e in out]


def merge_speaker_timeline(entries: Iterable[ReferenceEntry]) -> list[TimeInterval]:
    return merge_intervals(e.interval for e in entries)


def total_duration(intervals: Iterable[TimeInterval]) -> float:
    return sum(iv.duration() for iv in intervals)


def subtract_intervals(base: Sequence[TimeInterval],
                       remove: Sequence[TimeInterval]) -> list[TimeInterval]:
    """``base`` minus ``remove``; both must be sorted and disjoint."""
    out = []
    for iv in base:
        pieces = [(iv.start, iv.end)]
        for r in remove:
            if r.end <= iv.start or r.start >= iv.end:
                continue
            nxt = []
            for s, e in pieces:
                if r.start > s:
                    nxt.append((s, min(e, r.start)))
                if r.end < e:
                    nxt.append((max(s, r.end), e))
            pieces = nxt
        out.extend(TimeInterval(s, e) for s, e in pieces if e - s > TIME_EPS)
    return out
