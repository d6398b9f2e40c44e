"""Synthetic conversations and i-vector-like embedding streams.

Speakers are isotropic Gaussian prototypes; each segment embedding is the
duration-weighted mix of the active speakers' prototypes plus isotropic
channel noise. Randomness is split into independent streams (speakers,
conversation structure, noise) derived from ``seed ^ recording_index`` so
changing one knob does not reshuffle unrelated draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    DimensionMismatch,
    EmbeddingSegment,
    InvalidArgument,
    ParseError,
    ReferenceAnnotation,
    ReferenceEntry,
    TimeInterval,
)
from .segmenter import SegmenterConfig, active_durations, segment_annotation

STREAM_SPEAKERS = 0
STREAM_CONVERSATION = 1
STREAM_NOISE = 2

# every target speaker must have started talking before this point
ENROLLMENT_HORIZON = 15.0


@dataclass(frozen=True)
class SimConfig:
    b: int = 32
    sigma_b: float = 3.0
    sigma_w: float = 1.0
    turn_range: tuple[float, float] = (2.0, 8.0)
    pause_range: tuple[float, float] = (0.0, 1.0)
    duration: float = 120.0
    num_targets: int = 2
    num_nontargets: int = 0
    overlap_fraction: float = 0.0
    nontarget_turn_prob: float = 0.3
    seed: int = 1234

    def __post_init__(self):
        if self.b < 8:
            raise InvalidArgument("embedding dimension must be >= 8")
        if self.sigma_b <= 0 or self.sigma_w <= 0:
            raise InvalidArgument("sigma_b and sigma_w must be positive")
        if self.num_targets < 1 or self.num_nontargets < 0:
            raise InvalidArgument("need >= 1 target and >= 0 non-target speakers")
        if not 0 <= self.overlap_fraction < 1:
            raise InvalidArgument("overlap_fraction must be in [0, 1)")
        lo, hi = self.turn_range
        if not 0 < lo <= hi:
            raise InvalidArgument("bad turn_range")
        lo, hi = self.pause_range
        if not 0 <= lo <= hi:
            raise InvalidArgument("bad pause_range")


@dataclass(frozen=True, eq=False)
class SpeakerPrototype:
    speaker: str
    mean: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        if mean.ndim != 1 or not np.all(np.isfinite(mean)):
            raise InvalidArgument(f"prototype {self.speaker}: mean must be 1-D and finite")
        mean.flags.writeable = False
        object.__setattr__(self, "mean", mean)


@dataclass(eq=False)
class Recording:
    """One simulated (or ingested) recording with its reference and embedding stream."""

    annotation: ReferenceAnnotation
    segments: list[EmbeddingSegment]
    targets: list[str]
    nontargets: list[str] = field(default_factory=list)

    @property
    def recording_id(self) -> str:
        return self.annotation.recording_id


def stream_rng(seed: int, recording_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed ^ recording_index, stream])


def gen_speakers(n: int, cfg: SimConfig, rng: np.random.Generator,
                 prefix: str = "spk") -> list[SpeakerPrototype]:
    if n < 1:
        raise InvalidArgument("need at least one speaker")
    means = rng.normal(0.0, cfg.sigma_b, size=(n, cfg.b))
    return [SpeakerPrototype(f"{prefix}{i}", means[i]) for i in range(n)]


def gen_conversation(targets: Sequence[SpeakerPrototype], cfg: SimConfig,
                     rng: np.random.Generator,
                     nontargets: Sequence[SpeakerPrototype] = (),
                     recording_id: str = "rec") -> ReferenceAnnotation:
    """Alternating turn-taking among ``targets`` with optional non-target turns.

    The first round visits every target in order, with turns capped so that
    all of them start before ``ENROLLMENT_HORIZON``. Afterwards each turn goes
    to a non-target speaker with probability ``cfg.nontarget_turn_prob``;
    non-targets that have not spoken yet are forced in once the remaining
    time gets short. The last turn may run past ``cfg.duration``.
    """
    if not targets:
        raise InvalidArgument("need at least one target speaker")
    t_ids = [p.speaker for p in targets]
    nt_ids = [p.speaker for p in nontargets]
    turn_lo, turn_hi = cfg.turn_range
    pause_lo, pause_hi = cfg.pause_range
    n_t = len(t_ids)
    first_cap = max(0.5, (ENROLLMENT_HORIZON - n_t * pause_hi) / n_t - 1e-6)

    entries: list[ReferenceEntry] = []
    last_end: dict[str, float] = {}
    unspoken = list(nt_ids)
    t = 0.0
    prev: str | None = None
    prev_len = 0.0
    turn = 0
    next_target = 0
    while t < cfg.duration:
        if turn < n_t:
            spk = t_ids[turn]
            length = min(rng.uniform(turn_lo, turn_hi), first_cap)
            next_target = (turn + 1) % n_t
        else:
            length = rng.uniform(turn_lo, turn_hi)
            remaining = cfg.duration - t
            force = bool(unspoken) and remaining <= len(unspoken) * (turn_hi + pause_hi)
            nt_choices = [s for s in (unspoken or nt_ids) if s != prev]
            if nt_choices and (force or rng.uniform() < cfg.nontarget_turn_prob):
                spk = nt_choices[int(rng.integers(len(nt_choices)))]
                if spk in unspoken:
                    unspoken.remove(spk)
            else:
                if t_ids[next_target] == prev and n_t > 1:
                    next_target = (next_target + 1) % n_t
                spk = t_ids[next_target]
                next_target = (next_target + 1) % n_t
        start = t
        if (prev is not None and spk != prev and cfg.overlap_fraction > 0
                and rng.uniform() < cfg.overlap_fraction):
            back = rng.uniform(0.25, max(0.25, min(2.0, prev_len / 2)))
            floor = max((v for k, v in last_end.items() if k != prev), default=0.0)
            start = max(last_end[prev] - back, floor)
        start = max(start, last_end.get(spk, 0.0))
        end = start + length
        entries.append(ReferenceEntry(TimeInterval(start, end), spk))
        last_end[spk] = end
        prev, prev_len = spk, length
        t = max(t, end) + rng.uniform(pause_lo, pause_hi)
        turn += 1
    duration = max(cfg.duration, max(e.interval.end for e in entries))
    return ReferenceAnnotation(recording_id, tuple(entries), duration)


def gen_embedding(window: TimeInterval, active: Mapping[str, float],
                  prototypes: Mapping[str, SpeakerPrototype], cfg: SimConfig,
                  rng: np.random.Generator) -> np.ndarray:
    if not active:
        raise InvalidArgument(f"no active speaker in window {window!r}")
    total = sum(active.values())
    mean = np.zeros(cfg.b)
    for spk in sorted(active):
        mean += (active[spk] / total) * prototypes[spk].mean
    return mean + rng.normal(0.0, cfg.sigma_w, size=cfg.b)


def embed_annotation(annotation: ReferenceAnnotation,
                     prototypes: Mapping[str, SpeakerPrototype], cfg: SimConfig,
                     rng: np.random.Generator,
                     seg_cfg: SegmenterConfig = SegmenterConfig()) -> list[EmbeddingSegment]:
    """Segment an annotation with oracle VAD and draw one embedding per window."""
    out = []
    for idx, win, truth in segment_annotation(annotation, seg_cfg):
        vec = gen_embedding(win, active_durations(win, annotation), prototypes, cfg, rng)
        out.append(EmbeddingSegment(idx, win, vec, truth))
    return out


def gen_fold(cfg: SimConfig, fold: int, n_recordings: int,
             seg_cfg: SegmenterConfig = SegmenterConfig()) -> list[Recording]:
    """Simulate ``n_recordings`` recordings for one cross-validation fold.

    Non-target speakers of a recording are borrowed from the target speakers
    of other recordings in the same fold; with a single recording fresh
    prototypes are drawn instead.
    """
    base = fold * n_recordings
    protos = []
    for r in range(n_recordings):
        g = base + r
        protos.append(gen_speakers(cfg.num_targets, cfg,
                                   stream_rng(cfg.seed, g, STREAM_SPEAKERS),
                                   prefix=f"r{g:03d}_s"))
    recordings = []
    for r in range(n_recordings):
        g = base + r
        conv_rng = stream_rng(cfg.seed, g, STREAM_CONVERSATION)
        targets = protos[r]
        nontargets: list[SpeakerPrototype] = []
        if cfg.num_nontargets:
            pool = [p for k, ps in enumerate(protos) if k != r for p in ps]
            if len(pool) >= cfg.num_nontargets:
                pick = conv_rng.choice(len(pool), size=cfg.num_nontargets, replace=False)
                nontargets = [pool[i] for i in sorted(pick)]
            else:
                nontargets = gen_speakers(cfg.num_nontargets, cfg,
                                          stream_rng(cfg.seed, g, STREAM_SPEAKERS + 3),
                                          prefix=f"r{g:03d}_n")
        rec_id = f"fold{fold}_rec{r:03d}"
        ann = gen_conversation(targets, cfg, conv_rng, nontargets, recording_id=rec_id)
        lookup = {p.speaker: p for p in [*targets, *nontargets]}
        segs = embed_annotation(ann, lookup, cfg, stream_rng(cfg.seed, g, STREAM_NOISE), seg_cfg)
        recordings.append(Recording(ann, segs, [p.speaker for p in targets],
                                    [p.speaker for p in nontargets]))
    return recordings


def fold_prototypes(cfg: SimConfig, fold: int, n_recordings: int) -> dict[str, SpeakerPrototype]:
    """Regenerate the target prototypes of a fold (identical to those used by ``gen_fold``)."""
    out = {}
    for r in range(n_recordings):
        g = fold * n_recordings + r
        for p in gen_speakers(cfg.num_targets, cfg, stream_rng(cfg.seed, g, STREAM_SPEAKERS),
                              prefix=f"r{g:03d}_s"):
            out[p.speaker] = p
    return out


def write_embeddings(recordings: Mapping[str, Sequence[EmbeddingSegment]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec_id in sorted(recordings):
            for seg in recordings[rec_id]:
                vec = ",".join(repr(float(v)) for v in seg.vector)
                fh.write(f"{rec_id}\t{seg.interval.start!r}\t{seg.interval.end!r}\t{vec}\n")


def load_embeddings(path) -> dict[str, list[EmbeddingSegment]]:
    """Parse a tab-separated embedding file into per-recording segment lists.

    Segments are sorted by start time and re-indexed from 0 within each
    recording. The first vector seen fixes the expected dimension.
    """
    raw: dict[str, list[tuple[float, float, np.ndarray]]] = {}
    dim = None
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.rstrip("\r").split("\t")
        if len(fields) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}", lineno)
        rec_id, start_s, end_s, vec_s = fields
        try:
            start, end = float(start_s), float(end_s)
            vec = np.array([float(v) for v in vec_s.split(",")])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if not (math.isfinite(start) and math.isfinite(end)) or not np.all(np.isfinite(vec)):
            raise ParseError("non-finite value", lineno)
        if end <= start:
            raise ParseError(f"end {end} <= start {start}", lineno)
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise DimensionMismatch(f"line {lineno}: vector has dimension {vec.shape[0]}, "
                                    f"expected {dim}")
        raw.setdefault(rec_id, []).append((start, end, vec))
    out = {}
    for rec_id, rows in raw.items():
        rows.sort(key=lambda r: (r[0], r[1]))
        out[rec_id] = [EmbeddingSegment(i, TimeInterval(s, e), v) for i, (s, e, v) in enumerate(rows)]
    return out
