"""Oracle VAD and per-region sliding-window segmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .core import (
    TIME_EPS,
    InvalidArgument,
    ReferenceAnnotation,
    TimeInterval,
    interval_intersection,
    merge_intervals,
    merge_speaker_timeline,
)


@dataclass(frozen=True)
class SegmenterConfig:
    window: float = 1.0
    step: float = 0.5
    min_length: float = 0.5
    activity_fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.step <= self.window:
            raise InvalidArgument("need 0 < step <= window")
        if not 0 < self.min_length <= self.window:
            raise InvalidArgument("need 0 < min_length <= window")
        if not 0 < self.activity_fraction <= 1:
            raise InvalidArgument("activity_fraction must be in (0, 1]")


def oracle_vad(annotation: ReferenceAnnotation) -> list[TimeInterval]:
    return merge_speaker_timeline(annotation.entries)


def slide_windows(regions: Sequence[TimeInterval],
                  cfg: SegmenterConfig = SegmenterConfig()) -> list[tuple[int, TimeInterval]]:
    """Cut each region into windows starting at ``region.start + k * step``.

    Windows are truncated at the region end and dropped when shorter than
    ``cfg.min_length``. Indices run consecutively over all regions.
    """
    out = []
    idx = 0
    for region in regions:
        k = 0
        while True:
            # multiply rather than accumulate so starts stay on the exact grid
            start = region.start + k * cfg.step
            if start >= region.end - TIME_EPS:
                break
            end = min(start + cfg.window, region.end)
            if end - start >= cfg.min_length - TIME_EPS:
                out.append((idx, TimeInterval(start, end)))
                idx += 1
            k += 1
    return out


def label_segments(windows: Sequence[tuple[int, TimeInterval]],
                   annotation: ReferenceAnnotation,
                   cfg: SegmenterConfig = SegmenterConfig()):
    """Attach the set of speakers covering at least ``activity_fraction`` of each window."""
    per_speaker = {spk: merge_intervals(ivs)
                   for spk, ivs in annotation.by_speaker().items()}
    out = []
    for idx, win in windows:
        need = cfg.activity_fraction * win.duration()
        truth = set()
        for spk, ivs in per_speaker.items():
            covered = sum(interval_intersection(win, iv) for iv in ivs
                          if iv.start < win.end and iv.end > win.start)
            if covered >= need - TIME_EPS:
                truth.add(spk)
        out.append((idx, win, frozenset(truth)))
    return out


def active_durations(window: TimeInterval, annotation: ReferenceAnnotation) -> dict[str, float]:
    """Seconds each speaker is active inside ``window`` (speakers with zero time omitted)."""
    out: dict[str, float] = {}
    for e in annotation.entries:
        d = interval_intersection(window, e.interval)
        if d > TIME_EPS:
            out[e.speaker] = out.get(e.speaker, 0.0) + d
    return out


def segment_annotation(annotation: ReferenceAnnotation,
                       cfg: SegmenterConfig = SegmenterConfig()):
    """Oracle VAD, windowing and truth labeling in one call."""
    return label_segments(slide_windows(oracle_vad(annotation), cfg), annotation, cfg)
