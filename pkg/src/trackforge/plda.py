"""Two-covariance PLDA baseline and cosine scoring.

Model: ``x = mu + y + e`` with speaker variable ``y ~ N(0, B)`` and residual
``e ~ N(0, W)``. Two embeddings share ``y`` under the same-speaker hypothesis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    DimensionMismatch,
    EmbeddingSegment,
    InvalidArgument,
    LabeledSegment,
    ModelBank,
    ParseError,
    TrackforgeError,
)
from .tracker import Mode, OnlineTracker, TrackerConfig

CHECKPOINT_MAGIC = "trackforge-plda v1"
# relative eigenvalue floor on W, with an absolute minimum so W = 0 still ends up PD
W_FLOOR_REL = 1e-8
W_FLOOR_ABS = 1e-6


class InsufficientData(TrackforgeError):
    pass


@dataclass(frozen=True, eq=False)
class PldaModel:
    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray

    def __post_init__(self):
        b = self.mean.shape[0]
        if self.between.shape != (b, b) or self.within.shape != (b, b):
            raise DimensionMismatch("PLDA covariances must be b x b")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def _terms(self):
        # joint precision of a same-speaker pair is [[A, C], [C, A]]
        total = self.between + self.within
        total_inv = np.linalg.inv(total)
        schur = total - self.between @ total_inv @ self.between
        a = np.linalg.inv(schur)
        c = -total_inv @ self.between @ a
        c = (c + c.T) / 2
        quad = a - total_inv
        quad = (quad + quad.T) / 2
        _, logdet_total = np.linalg.slogdet(total)
        _, logdet_schur = np.linalg.slogdet(schur)
        const = 0.5 * (logdet_total - logdet_schur)
        return quad, c, const

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{CHECKPOINT_MAGIC} b={self.dim}\n")
            fh.write(" ".join(repr(float(v)) for v in self.mean) + "\n")
            for mat in (self.between, self.within):
                for row in mat:
                    fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "PldaModel":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
            raise ParseError("not a trackforge-plda checkpoint", 1)
        try:
            b = int(lines[0].split("b=", 1)[1].split()[0])
        except (IndexError, ValueError):
            raise ParseError("bad header", 1) from None
        if len(lines) != 2 + 2 * b:
            raise ParseError(f"expected {2 + 2 * b} lines, found {len(lines)}")
        try:
            rows = [np.array([float(v) for v in ln.split()]) for ln in lines[1:]]
        except ValueError as exc:
            raise ParseError(str(exc)) from None
        if any(r.shape != (b,) for r in rows):
            raise DimensionMismatch(f"every PLDA row must have {b} values")
        return cls(rows[0], np.stack(rows[1:1 + b]), np.stack(rows[1 + b:]))


def floor_eigenvalues(mat: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return (out + out.T) / 2


def fit_plda(data: Mapping[str, Sequence[np.ndarray]]) -> PldaModel:
    """Maximum-likelihood plug-in estimates of ``mu``, ``B`` and ``W``.

    ``B`` is the (unweighted) covariance of the speaker means around the
    global mean, ``W`` the pooled scatter around each speaker's own mean.
    """
    groups = {spk: np.asarray(v, dtype=float) for spk, v in data.items()}
    if len(groups) < 2:
        raise InsufficientData(f"need >= 2 speakers, got {len(groups)}")
    small = [spk for spk, v in groups.items() if v.shape[0] < 2]
    if small:
        raise InsufficientData(f"speakers with fewer than 2 vectors: {sorted(small)[:5]}")
    dims = {v.shape[1] for v in groups.values()}
    if len(dims) != 1:
        raise DimensionMismatch(f"inconsistent dimensions {sorted(dims)}")
    keys = sorted(groups)
    allx = np.concatenate([groups[k] for k in keys])
    mu = allx.mean(axis=0)
    means = np.stack([groups[k].mean(axis=0) for k in keys])
    dm = means - mu
    between = dm.T @ dm / len(keys)
    within = np.zeros_like(between)
    for k, m in zip(keys, means):
        r = groups[k] - m
        within += r.T @ r
    within /= allx.shape[0]
    b = mu.shape[0]
    floor = max(W_FLOOR_REL * np.trace(within) / b, W_FLOOR_ABS)
    return PldaModel(mu, (between + between.T) / 2, floor_eigenvalues(within, floor))


def fit_plda_from_recordings(streams: Sequence[Sequence[EmbeddingSegment]]) -> PldaModel:
    """Fit on every single-speaker segment of the given streams, grouped by speaker."""
    data: dict[str, list[np.ndarray]] = {}
    for stream in streams:
        for seg in stream:
            if len(seg.truth) == 1:
                data.setdefault(next(iter(seg.truth)), []).append(seg.vector)
    return fit_plda({k: v for k, v in data.items() if len(v) >= 2})


def score_llr(model: PldaModel, e1, e2) -> float:
    """Same-speaker vs different-speaker log-likelihood ratio for two embeddings."""
    x1 = np.asarray(e1, dtype=float) - model.mean
    x2 = np.asarray(e2, dtype=float) - model.mean
    if x1.shape != (model.dim,) or x2.shape != (model.dim,):
        raise DimensionMismatch(f"expected vectors of length {model.dim}, "
                                f"got {np.shape(e1)} and {np.shape(e2)}")
    quad, c, const = model._terms
    s, d = x1 + x2, x1 - x2
    # the cross term 2*x1'Cx2 written via sum/difference stays exactly symmetric
    cross = 0.5 * (s @ c @ s - d @ c @ d)
    return float(-0.5 * (x1 @ quad @ x1 + x2 @ quad @ x2 + cross) + const)


def score_llr_matrix(model: PldaModel, segs: np.ndarray, models: np.ndarray) -> np.ndarray:
    """``(T, S)`` LLRs between every row of ``segs`` and every row of ``models``."""
    quad, c, const = model._terms
    x = segs - model.mean
    m = models - model.mean
    qx = np.einsum("ti,ij,tj->t", x, quad, x)
    qm = np.einsum("si,ij,sj->s", m, quad, m)
    cross = 2 * (x @ c @ m.T)
    return -0.5 * (qx[:, None] + qm[None, :] + cross) + const


def cosine_score(e1, e2) -> float:
    a = np.asarray(e1, dtype=float)
    b = np.asarray(e2, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidArgument("cosine score of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def length_normalize(vectors: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Center and scale each vector to norm ``sqrt(b)``."""
    x = np.atleast_2d(vectors) - mean
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0, 1.0, norms) * np.sqrt(x.shape[1])


def plda_scorer(model: PldaModel, bank: ModelBank):
    if bank.dim != model.dim:
        raise DimensionMismatch(f"PLDA is b={model.dim}, bank is b={bank.dim}")
    mats = bank.matrix()
    return lambda seg: [score_llr(model, seg.vector, m) for m in mats]


def cosine_scorer(bank: ModelBank, center: np.ndarray | None = None):
    c = np.zeros(bank.dim) if center is None else center
    mats = bank.matrix() - c
    return lambda seg: [cosine_score(seg.vector - c, m) for m in mats]


def plda_track(model: PldaModel, bank: ModelBank, stream: Sequence[EmbeddingSegment],
               mode: Mode | str = Mode.IDENTIFY, threshold_llr: float = 0.0,
               smoothing: bool = True) -> list[LabeledSegment]:
    """Same online path as the network tracker with LLRs as scores."""
    tracker = OnlineTracker(plda_scorer(model, bank), bank.speakers,
                            TrackerConfig(Mode(mode), threshold_llr, smoothing))
    if not stream:
        return []
    for seg in stream:
        if seg.dim != model.dim:
            raise DimensionMismatch(f"segment {seg.index} has dim {seg.dim}, PLDA has {model.dim}")
    scores = score_llr_matrix(model, np.stack([s.vector for s in stream]), bank.matrix())
    out = []
    for seg, row in zip(stream, scores):
        out.extend(tracker.push(seg, row))
    out.extend(tracker.flush())
    return out


def cosine_track(bank: ModelBank, stream: Sequence[EmbeddingSegment],
                 mode: Mode | str = Mode.IDENTIFY, threshold: float = 0.5,
                 smoothing: bool = True, center: np.ndarray | None = None) -> list[LabeledSegment]:
    tracker = OnlineTracker(cosine_scorer(bank, center), bank.speakers,
                            TrackerConfig(Mode(mode), threshold, smoothing))
    return list(tracker.run(stream))
