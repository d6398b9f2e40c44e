"""Enrollment: average a speaker's pure segments inside the model-time window."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    EmbeddingSegment,
    InvalidArgument,
    ModelBank,
    ReferenceAnnotation,
    SpeakerModel,
    TimeInterval,
    TrackforgeError,
    UnknownSpeaker,
)

CANONICAL_MODEL_TIMES = (3.0, 5.5, 10.5)


class InsufficientEnrollment(TrackforgeError):
    def __init__(self, speaker: str, window: TimeInterval):
        self.speaker = speaker
        self.window = window
        super().__init__(f"no pure segments of speaker {speaker} in enrollment window {window!r}")


@dataclass(frozen=True)
class ModelTime:
    seconds: float

    def __post_init__(self):
        if not self.seconds > 0:
            raise InvalidArgument("model time must be positive")


def enrollment_start(annotation: ReferenceAnnotation, speaker: str) -> float:
    starts = [e.interval.start for e in annotation.entries if e.speaker == speaker]
    if not starts:
        raise UnknownSpeaker(f"speaker {speaker!r} not in {annotation.recording_id}")
    return min(starts)


def build_model(stream: Sequence[EmbeddingSegment], annotation: ReferenceAnnotation,
                speaker: str, mt: ModelTime | float) -> SpeakerModel:
    seconds = mt.seconds if isinstance(mt, ModelTime) else ModelTime(mt).seconds
    start = enrollment_start(annotation, speaker)
    window = TimeInterval(start, start + seconds)
    target = frozenset([speaker])
    # half-open overlap test: touching the window edge does not count
    picked = [s.vector for s in stream
              if s.interval.start < window.end and s.interval.end > window.start
              and s.truth == target]
    if not picked:
        raise InsufficientEnrollment(speaker, window)
    return SpeakerModel(speaker, np.mean(picked, axis=0), len(picked), window)


def build_bank(stream: Sequence[EmbeddingSegment], annotation: ReferenceAnnotation,
               targets: Sequence[str], mt: ModelTime | float) -> ModelBank:
    """One model per target, ordered by enrollment start (stable for ties)."""
    order = sorted(targets, key=lambda spk: enrollment_start(annotation, spk))
    return ModelBank(tuple(build_model(stream, annotation, spk, mt) for spk in order))
