"""Diarization error rate, verification trials, EER and minDCF."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import (
    TIME_EPS,
    UNKNOWN,
    EmbeddingSegment,
    LabeledSegment,
    ReferenceAnnotation,
    TimeInterval,
    TrackforgeError,
    merge_intervals,
)


class UndefinedDer(TrackforgeError):
    pass


class InsufficientTrials(TrackforgeError):
    pass


class SpeakerMapping(str, enum.Enum):
    IDENTITY = "identity"
    OPTIMAL = "optimal"


@dataclass(frozen=True)
class DerReport:
    missed: float
    false_alarm: float
    confusion: float
    total: float

    @property
    def der(self) -> float:
        return (self.missed + self.false_alarm + self.confusion) / self.total

    @staticmethod
    def combine(reports: Iterable["DerReport"]) -> "DerReport":
        """Time-weighted pooling (sums every component)."""
        reports = list(reports)
        if not reports:
            raise UndefinedDer("no reports to combine")
        return DerReport(sum(r.missed for r in reports), sum(r.false_alarm for r in reports),
                         sum(r.confusion for r in reports), sum(r.total for r in reports))


def _activity(points: np.ndarray, intervals: Sequence[tuple[float, float, str]],
              labels: list[str]) -> np.ndarray:
    """``(n_slices, n_labels)`` count of intervals of each label covering each slice."""
    act = np.zeros((len(points) - 1, len(labels)), dtype=int)
    col = {lab: i for i, lab in enumerate(labels)}
    for s, e, lab in intervals:
        lo = np.searchsorted(points, s - TIME_EPS, side="left")
        hi = np.searchsorted(points, e - TIME_EPS, side="left")
        act[lo:hi, col[lab]] += 1
    return act


def _boundaries(values: Iterable[float]) -> np.ndarray:
    pts = np.unique(np.asarray(sorted(values), dtype=float))
    if pts.size == 0:
        return pts
    # collapse points closer than TIME_EPS so no slice is a rounding artifact
    keep = np.concatenate([[True], np.diff(pts) > TIME_EPS])
    return pts[keep]


def compute_der(reference: ReferenceAnnotation,
                hypothesis: Sequence[tuple[TimeInterval, str]],
                collar: float = 0.0,
                mapping: SpeakerMapping | str = SpeakerMapping.IDENTITY) -> DerReport:
    """Slice-based DER with overlap counted by multiplicity.

    UNKNOWN hypothesis labels are treated as silence. With a collar, every
    reference boundary gets a ``±collar`` no-score zone. OPTIMAL mapping
    first relabels hypothesis speakers by the one-to-one assignment that
    maximizes matched time.
    """
    mapping = SpeakerMapping(mapping)
    ref = [(e.interval.start, e.interval.end, e.speaker) for e in reference.entries]
    hyp = [(iv.start, iv.end, lab) for iv, lab in hypothesis if lab != UNKNOWN]
    if not ref:
        raise UndefinedDer(f"{reference.recording_id}: reference has no speech")
    excluded: list[TimeInterval] = []
    if collar > 0:
        zones = []
        for s, e, _ in ref:
            for t in (s, e):
                zones.append(TimeInterval(max(0.0, t - collar), t + collar))
        excluded = merge_intervals(zones)
    pts = _boundaries([v for s, e, _ in ref + hyp for v in (s, e)]
                      + [v for iv in excluded for v in (iv.start, iv.end)])
    dur = np.diff(pts)
    if excluded:
        mids = (pts[:-1] + pts[1:]) / 2
        scored = np.ones_like(dur, dtype=bool)
        for iv in excluded:
            scored &= ~((mids >= iv.start) & (mids < iv.end))
        dur = np.where(scored, dur, 0.0)

    ref_labels = sorted({lab for *_, lab in ref})
    hyp_labels = sorted({lab for *_, lab in hyp})
    R = _activity(pts, ref, ref_labels)
    H = _activity(pts, hyp, hyp_labels)
    n_ref = R.sum(axis=1)
    n_hyp = H.sum(axis=1)

    pairs: list[tuple[int, int]]
    if mapping is SpeakerMapping.IDENTITY:
        ri = {lab: i for i, lab in enumerate(ref_labels)}
        pairs = [(h, ri[lab]) for h, lab in enumerate(hyp_labels) if lab in ri]
    else:
        pairs = optimal_mapping(R, H, dur)
    matched = np.zeros_like(dur)
    for h, r in pairs:
        matched += np.minimum(H[:, h], R[:, r])

    missed = float(dur @ np.maximum(0, n_ref - n_hyp))
    fa = float(dur @ np.maximum(0, n_hyp - n_ref))
    conf = float(dur @ (np.minimum(n_ref, n_hyp) - matched))
    total = float(dur @ n_ref)
    if total <= 0:
        raise UndefinedDer(f"{reference.recording_id}: no scorable reference speech")
    return DerReport(missed, fa, conf, total)


def optimal_mapping(R: np.ndarray, H: np.ndarray, dur: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one (hyp, ref) column pairs maximizing total co-active time."""
    if R.shape[1] == 0 or H.shape[1] == 0:
        return []
    gain = np.array([[dur @ np.minimum(H[:, h], R[:, r]) for r in range(R.shape[1])]
                     for h in range(H.shape[1])])
    rows, cols = linear_sum_assignment(gain, maximize=True)
    return [(int(h), int(r)) for h, r in zip(rows, cols) if gain[h, r] > 0]


def exhaustive_mapping(R: np.ndarray, H: np.ndarray, dur: np.ndarray) -> list[tuple[int, int]]:
    """Brute-force counterpart of ``optimal_mapping`` (small speaker counts only)."""
    nh, nr = H.shape[1], R.shape[1]
    best, best_pairs = -1.0, []
    if nh <= nr:
        candidates = (list(zip(range(nh), p)) for p in itertools.permutations(range(nr), nh))
    else:
        candidates = (list(zip(p, range(nr))) for p in itertools.permutations(range(nh), nr))
    for pairs in candidates:
        g = sum(dur @ np.minimum(H[:, h], R[:, r]) for h, r in pairs)
        if g > best + 1e-12:
            best, best_pairs = g, pairs
    return best_pairs


@dataclass(frozen=True)
class TrialScore:
    recording: str
    index: int
    speaker: str
    score: float
    is_target: bool


def generate_trials(recording: str, stream: Sequence[EmbeddingSegment],
                    speakers: Sequence[str],
                    labeled: Sequence[LabeledSegment]) -> list[TrialScore]:
    """One trial per (segment, bank model) using the tracker's raw scores."""
    by_index = {seg.index: seg for seg in stream}
    out = []
    for lab in labeled:
        truth = by_index[lab.index].truth
        for spk, score in zip(speakers, lab.scores):
            out.append(TrialScore(recording, lab.index, spk, float(score), spk in truth))
    return out


def _split(trials) -> tuple[np.ndarray, np.ndarray]:
    tgt = np.sort(np.array([t.score for t in trials if t.is_target], dtype=float))
    non = np.sort(np.array([t.score for t in trials if not t.is_target], dtype=float))
    if tgt.size == 0 or non.size == 0:
        raise InsufficientTrials(f"need both classes: {tgt.size} target, {non.size} nontarget")
    return tgt, non


def detection_curve(trials) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (ascending, ending at +inf) with their miss and false-accept rates.

    A trial is accepted iff ``score >= threshold``. The thresholds are every
    distinct score plus +inf, so accept-all and reject-all are both present.
    """
    tgt, non = _split(trials)
    thr = np.append(np.unique(np.concatenate([tgt, non])), np.inf)
    frr = np.searchsorted(tgt, thr, side="left") / tgt.size
    far = 1.0 - np.searchsorted(non, thr, side="left") / non.size
    return thr, frr, far


def _eer_from_curve(frr: np.ndarray, far: np.ndarray) -> tuple[float, int]:
    diff = frr - far                      # non-decreasing along the sweep
    i = int(np.argmax(diff >= 0))         # reject-all guarantees a crossing
    if diff[i] == 0 or i == 0:
        return float(frr[i]), i
    # linear interpolation between the two operating points that bracket the crossing
    w = -diff[i - 1] / (diff[i] - diff[i - 1])
    return float(frr[i - 1] + w * (frr[i] - frr[i - 1])), i


def compute_eer(trials) -> float:
    _, frr, far = detection_curve(trials)
    return _eer_from_curve(frr, far)[0]


def eer_threshold(trials) -> float:
    """Sweep threshold of the first operating point at or past the EER crossing."""
    thr, frr, far = detection_curve(trials)
    return float(thr[_eer_from_curve(frr, far)[1]])


def _normalizer(p_target: float, c_miss: float, c_fa: float) -> float:
    return min(c_miss * p_target, c_fa * (1 - p_target))


def normalized_dcf(trials, threshold: float, p_target: float = 0.001,
                   c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    tgt, non = _split(trials)
    frr = np.mean(tgt < threshold)
    far = np.mean(non >= threshold)
    return float((c_miss * frr * p_target + c_fa * far * (1 - p_target))
                 / _normalizer(p_target, c_miss, c_fa))


def compute_min_dcf(trials, p_target: float = 0.001, c_miss: float = 1.0,
                    c_fa: float = 1.0) -> float:
    _, frr, far = detection_curve(trials)
    dcf = c_miss * frr * p_target + c_fa * far * (1 - p_target)
    return float(dcf.min() / _normalizer(p_target, c_miss, c_fa))
