"""Online segment labeling and label post-processing.

Segments are labeled one at a time as they arrive. Smoothing runs with a
one-segment lag: when segment ``t`` arrives and ``label(t-2) == label(t) !=
label(t-1)`` over three contiguous segments, ``t-1`` is relabeled. After
that, segment ``t-1`` can no longer change and is released.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .core import (
    TIME_EPS,
    UNKNOWN,
    DimensionMismatch,
    EmbeddingSegment,
    InvalidArgument,
    LabeledSegment,
    ModelBank,
    TimeInterval,
)
from .neuralnet import NetworkShape, assemble_input, forward, score_stream


class Mode(str, enum.Enum):
    IDENTIFY = "identify"
    VERIFY = "verify"


@dataclass(frozen=True)
class TrackerConfig:
    mode: Mode = Mode.IDENTIFY
    threshold: float = 0.5
    smoothing: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))


def decide(scores: Sequence[float], speakers: Sequence[str], mode: Mode,
           threshold: float) -> str:
    """Argmax label (ties go to the lowest index); in VERIFY mode UNKNOWN below threshold."""
    scores = np.asarray(scores, dtype=float)
    best = int(np.argmax(scores))
    if Mode(mode) is Mode.VERIFY and not scores[best] >= threshold:
        return UNKNOWN
    return speakers[best]


def contiguous(a: LabeledSegment, b: LabeledSegment) -> bool:
    """Consecutive indices whose windows overlap or touch, i.e. the same speech region."""
    return b.index == a.index + 1 and b.interval.start <= a.interval.end + TIME_EPS


class OnlineSmoother:
    """Streaming form of ``smooth``: push labels in order, get back finalized ones.

    Each push releases at most the previous segment, so the label of ``t`` is
    out (and final) before ``t + 2`` is pushed.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._final: LabeledSegment | None = None     # t-2, already released
        self._pending: LabeledSegment | None = None   # t-1, may still be rewritten

    def push(self, seg: LabeledSegment) -> list[LabeledSegment]:
        prev = self._pending
        if prev is not None and seg.index <= prev.index:
            raise InvalidArgument("segments must arrive in increasing index order")
        if (self.enabled and prev is not None and self._final is not None
                and contiguous(self._final, prev) and contiguous(prev, seg)
                and self._final.label == seg.label != prev.label):
            prev = prev.with_label(seg.label)
        self._final, self._pending = prev, seg
        return [prev] if prev is not None else []

    def flush(self) -> list[LabeledSegment]:
        out = [self._pending] if self._pending is not None else []
        self._final = self._pending = None
        return out


def smooth(labels: Iterable[LabeledSegment]) -> list[LabeledSegment]:
    sm = OnlineSmoother()
    out = []
    for seg in labels:
        out.extend(sm.push(seg))
    out.extend(sm.flush())
    return out


def merge_contiguous(labels: Sequence[LabeledSegment]) -> list[tuple[TimeInterval, str]]:
    """Collapse runs of equal labels over contiguous segments into single intervals."""
    out: list[tuple[TimeInterval, str]] = []
    run_start = run_end = None
    run_label = None
    prev = None
    for seg in labels:
        if prev is not None and seg.label == run_label and contiguous(prev, seg):
            run_end = max(run_end, seg.interval.end)
        else:
            if prev is not None:
                out.append((TimeInterval(run_start, run_end), run_label))
            run_start, run_end, run_label = seg.interval.start, seg.interval.end, seg.label
        prev = seg
    if prev is not None:
        out.append((TimeInterval(run_start, run_end), run_label))
    return out


ScoreFn = Callable[[EmbeddingSegment], Sequence[float]]


class OnlineTracker:
    """Label a stream segment by segment with any per-segment scorer.

    ``scorer`` maps one segment to ``S`` scores aligned with ``speakers``.
    ``threshold`` applies in VERIFY mode on the scorer's scale.
    """

    def __init__(self, scorer: ScoreFn, speakers: Sequence[str], cfg: TrackerConfig):
        self.scorer = scorer
        self.speakers = list(speakers)
        self.cfg = cfg
        self._smoother = OnlineSmoother(cfg.smoothing)
        self._last_index = -1

    def label(self, seg: EmbeddingSegment, scores=None) -> LabeledSegment:
        if seg.index <= self._last_index:
            raise InvalidArgument("segments must be processed in index order")
        self._last_index = seg.index
        if scores is None:
            scores = self.scorer(seg)
        scores = tuple(float(s) for s in scores)
        if len(scores) != len(self.speakers):
            raise DimensionMismatch(f"scorer returned {len(scores)} scores for "
                                    f"{len(self.speakers)} models")
        return LabeledSegment(seg.index, seg.interval,
                              decide(scores, self.speakers, self.cfg.mode, self.cfg.threshold),
                              scores)

    def push(self, seg: EmbeddingSegment, scores=None) -> list[LabeledSegment]:
        return self._smoother.push(self.label(seg, scores))

    def flush(self) -> list[LabeledSegment]:
        return self._smoother.flush()

    def run(self, stream: Iterable[EmbeddingSegment]) -> Iterator[LabeledSegment]:
        for seg in stream:
            yield from self.push(seg)
        yield from self.flush()


def dnn_scorer(params, bank: ModelBank) -> ScoreFn:
    if params.shape != NetworkShape(bank.dim, len(bank)):
        raise DimensionMismatch(f"network is b={params.shape.b} S={params.shape.S}, "
                                f"bank is b={bank.dim} S={len(bank)}")

    def score(seg: EmbeddingSegment):
        return forward(params, assemble_input(seg, bank))

    return score


def track_stream(params, bank: ModelBank, stream: Sequence[EmbeddingSegment],
                 cfg: TrackerConfig = TrackerConfig()) -> list[LabeledSegment]:
    """Label every segment with the network, in index order, then smooth if enabled.

    Scores are computed in one batch; they depend only on the segment and the
    bank, so this matches feeding ``OnlineTracker`` one segment at a time.
    """
    if cfg.mode is Mode.VERIFY and not 0 < cfg.threshold < 1:
        raise InvalidArgument("network scores are probabilities: threshold must be in (0, 1)")
    scores = score_stream(params, bank, stream)
    tracker = OnlineTracker(dnn_scorer(params, bank), bank.speakers, cfg)
    out = []
    for seg, row in zip(stream, scores):
        out.extend(tracker.push(seg, row))
    out.extend(tracker.flush())
    return out
