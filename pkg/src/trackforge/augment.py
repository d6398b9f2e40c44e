"""Overlap augmentation of a recording's reference timeline.

Single-speaker material of every speaker pair is overlapped, cut into chunks
and spliced into the recording at random points. Splicing inserts time:
everything after the insertion point moves right by the chunk length, so no
original speech is covered or lost.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    TIME_EPS,
    InvalidArgument,
    ParseError,
    ReferenceAnnotation,
    ReferenceEntry,
    TimeInterval,
    TrackforgeError,
    merge_intervals,
    subtract_intervals,
    total_duration,
)
from .segmenter import oracle_vad

log = logging.getLogger(__name__)

# a chunk shorter than this is not worth splicing (and would not survive RTTM rounding)
MIN_CHUNK = 0.1


class InsufficientSpeakers(TrackforgeError):
    pass


class EmptyPool(TrackforgeError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    target: float = 0.18
    chunk_range: tuple[float, float] = (1.0, 4.0)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.target < 1:
            raise InvalidArgument("target added overlap must be in (0, 1)")
        lo, hi = self.chunk_range
        if not 0 < lo <= hi:
            raise InvalidArgument("bad chunk_range")


@dataclass
class OverlapUtterance:
    speakers: tuple[str, str]
    duration: float
    used: float = 0.0

    @property
    def remaining(self) -> float:
        return self.duration - self.used


@dataclass(frozen=True)
class Insertion:
    speakers: tuple[str, str]
    at: float
    length: float


@dataclass
class AugmentResult:
    annotation: ReferenceAnnotation
    achieved: float
    insertions: list[Insertion] = field(default_factory=list)
    status: str = "ok"


def extract_single_speaker(annotation: ReferenceAnnotation) -> dict[str, list[TimeInterval]]:
    """Per speaker, the time where that speaker talks alone."""
    by_spk = {spk: merge_intervals(ivs) for spk, ivs in annotation.by_speaker().items()}
    out = {}
    for spk, own in by_spk.items():
        others = merge_intervals(iv for k, ivs in by_spk.items() if k != spk for iv in ivs)
        out[spk] = subtract_intervals(own, others)
    return out


def pairwise_overlap(single: Mapping[str, Sequence[TimeInterval]],
                     rng: np.random.Generator | None = None) -> list[OverlapUtterance]:
    """One two-speaker utterance per unordered pair, as long as the shorter side's material."""
    avail = {spk: total_duration(ivs) for spk, ivs in single.items()}
    usable = sorted(spk for spk, d in avail.items() if d > TIME_EPS)
    if len(usable) < 2:
        raise InsufficientSpeakers(f"need >= 2 speakers with solo speech, have {len(usable)}")
    return [OverlapUtterance((a, b), min(avail[a], avail[b]))
            for a, b in itertools.combinations(usable, 2)]


def overlap_time(annotation: ReferenceAnnotation) -> float:
    """Seconds during which at least two speakers are active."""
    pts = sorted({v for e in annotation.entries for v in (e.interval.start, e.interval.end)})
    total = 0.0
    for lo, hi in zip(pts, pts[1:]):
        mid = (lo + hi) / 2
        n = sum(1 for e in annotation.entries if e.interval.start <= mid < e.interval.end)
        if n >= 2:
            total += hi - lo
    return total


def _splice(entries: list[tuple[float, float, str]], at: float,
            length: float) -> list[tuple[float, float, str]]:
    out = []
    for s, e, spk in entries:
        if e <= at:
            out.append((s, e, spk))
        elif s >= at:
            out.append((s + length, e + length, spk))
        else:
            out.append((s, at, spk))
            out.append((at + length, e + length, spk))
    return out


def insert_random(annotation: ReferenceAnnotation, pool: Sequence[OverlapUtterance],
                  cfg: AugmentConfig, rng: np.random.Generator) -> AugmentResult:
    """Splice overlap chunks until the added overlap reaches ``cfg.target`` of the original speech.

    Chunk lengths are uniform in ``cfg.chunk_range``, clipped to what the
    current pool entry has left and to what is still needed, so the target
    is met without overshooting. Pool entries are consumed round-robin.
    """
    if not pool:
        raise EmptyPool("overlap pool is empty")
    pool = [OverlapUtterance(u.speakers, u.duration, u.used) for u in pool]
    speech = total_duration(oracle_vad(annotation))
    if speech <= 0:
        raise InvalidArgument(f"{annotation.recording_id}: no speech to augment")
    need_total = cfg.target * speech
    entries = [(e.interval.start, e.interval.end, e.speaker) for e in annotation.entries]
    duration = annotation.duration
    added = 0.0
    inserts: list[Insertion] = []
    turn = 0
    lo, hi = cfg.chunk_range
    while need_total - added >= MIN_CHUNK:
        live = [u for u in pool if u.remaining >= MIN_CHUNK]
        if not live:
            break
        src = live[turn % len(live)]
        turn += 1
        length = min(rng.uniform(lo, hi), src.remaining, need_total - added)
        at = float(rng.uniform(0.0, duration))
        entries = _splice(entries, at, length)
        a, b = src.speakers
        entries += [(at, at + length, a), (at, at + length, b)]
        src.used += length
        added += length
        duration += length
        inserts.append(Insertion((a, b), at, length))
    achieved = added / speech
    status = "ok"
    if achieved < 0.5 * cfg.target:
        status = "warning"
        log.warning("%s: pool exhausted at added overlap %.3f (target %.3f)",
                    annotation.recording_id, achieved, cfg.target)
    out = ReferenceAnnotation(
        annotation.recording_id,
        tuple(ReferenceEntry(TimeInterval(s, e), spk) for s, e, spk in entries),
        duration)
    return AugmentResult(out, achieved, inserts, status)


def augment_recording(annotation: ReferenceAnnotation, cfg: AugmentConfig,
                      rng: np.random.Generator) -> AugmentResult:
    pool = pairwise_overlap(extract_single_speaker(annotation), rng)
    return insert_random(annotation, pool, cfg, rng)


def remove_insertions(annotation: ReferenceAnnotation,
                      insertions: Sequence[Insertion]) -> ReferenceAnnotation:
    """Undo ``insert_random``: drop spliced chunks, shift back and re-join split entries."""
    entries = [(e.interval.start, e.interval.end, e.speaker) for e in annotation.entries]
    duration = annotation.duration
    tol = 1e-6
    for ins in reversed(insertions):
        end = ins.at + ins.length
        chunk = set(ins.speakers)
        kept = []
        for s, e, spk in entries:
            if spk in chunk and abs(s - ins.at) <= tol and abs(e - end) <= tol:
                chunk.discard(spk)
                continue
            if s >= end - tol:
                s, e = s - ins.length, e - ins.length
            kept.append((s, e, spk))
        if chunk:
            raise InvalidArgument(f"insertion at {ins.at} not found for {sorted(chunk)}")
        # re-join pieces of an entry that the insertion point had split
        kept.sort(key=lambda r: (r[2], r[0]))
        joined: list[tuple[float, float, str]] = []
        for s, e, spk in kept:
            if (joined and joined[-1][2] == spk and abs(joined[-1][1] - ins.at) <= tol
                    and abs(s - ins.at) <= tol):
                joined[-1] = (joined[-1][0], e, spk)
            else:
                joined.append((s, e, spk))
        entries = joined
        duration -= ins.length
    return ReferenceAnnotation(
        annotation.recording_id,
        tuple(ReferenceEntry(TimeInterval(s, e), spk) for s, e, spk in entries),
        duration)


def write_sidecar(results: Mapping[str, AugmentResult], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# recording speaker_a speaker_b insert_at length\n")
        for rec in sorted(results):
            for ins in results[rec].insertions:
                a, b = ins.speakers
                fh.write(f"INSERT {rec} {a} {b} {ins.at!r} {ins.length!r}\n")


def read_sidecar(path) -> dict[str, list[Insertion]]:
    out: dict[str, list[Insertion]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split()
        if len(f) != 6 or f[0] != "INSERT":
            raise ParseError("expected: INSERT rec spk_a spk_b at length", lineno)
        try:
            at, length = float(f[4]), float(f[5])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        out.setdefault(f[1], []).append(Insertion((f[2], f[3]), at, length))
    return out
