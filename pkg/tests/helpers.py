"""Small builders shared by the test modules."""

import numpy as np

from trackforge.core import (
    EmbeddingSegment,
    LabeledSegment,
    ModelBank,
    ReferenceAnnotation,
    ReferenceEntry,
    SpeakerModel,
    TimeInterval,
)


def ann(*entries, rec="r", duration=None):
    """``ann((0, 2, "A"), (1, 3, "B"))``"""
    items = tuple(ReferenceEntry(TimeInterval(s, e), spk) for s, e, spk in entries)
    if duration is None:
        duration = max((e for _, e, _ in entries), default=1.0)
    return ReferenceAnnotation(rec, items, duration)


def seg(index, start, end, vector, truth=()):
    return EmbeddingSegment(index, TimeInterval(start, end), np.asarray(vector, float),
                            frozenset(truth))


def bank(*pairs):
    """``bank(("A", vec), ("B", vec))``"""
    window = TimeInterval(0, 1)
    return ModelBank(tuple(SpeakerModel(spk, np.asarray(v, float), 1, window)
                           for spk, v in pairs))


def labeled(labels, step=0.5, width=1.0, start_index=0):
    """Contiguous 1 s / 0.5 s windows carrying the given labels."""
    return [LabeledSegment(start_index + i, TimeInterval(i * step, i * step + width), lab, ())
            for i, lab in enumerate(labels)]
