"""Two-fold cross-validated tracking experiments on simulated recordings.

Each fold is evaluated with systems fitted on the other fold. Per fold, DER
pools scored time over all evaluated recordings and EER/minDCF pool the
trials. The averaged row is the mean of the two folds.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentConfig, AugmentResult, augment_recording, write_sidecar
from .core import InvalidArgument, LabeledSegment, ModelBank
from .formats import write_report, write_rttm, write_trials
from .metrics import (
    DerReport,
    TrialScore,
    compute_der,
    compute_eer,
    compute_min_dcf,
    generate_trials,
)
from .modelgen import CANONICAL_MODEL_TIMES, InsufficientEnrollment, build_bank
from .neuralnet import (
    NetworkParams,
    NetworkShape,
    TrainConfig,
    build_training_set,
    init_network,
    train,
)
from .plda import PldaModel, cosine_track, fit_plda_from_recordings, plda_track
from .segmenter import SegmenterConfig
from .simulator import (
    STREAM_NOISE,
    Recording,
    SimConfig,
    embed_annotation,
    fold_prototypes,
    gen_fold,
    stream_rng,
)
from .tracker import Mode, TrackerConfig, merge_contiguous, track_stream

log = logging.getLogger(__name__)

CSV_COLUMNS = ("condition", "system", "model_time", "fold", "der", "miss", "fa", "conf",
               "eer", "min_dcf", "n_recordings", "n_skipped")
NONTARGET_SPEAKERS = 2


class Condition(str, enum.Enum):
    OPTIMUM = "optimum"
    NONTARGET = "nontarget"
    OVERLAP = "overlap"


class System(str, enum.Enum):
    DNN = "dnn"
    PLDA = "plda"
    COSINE = "cosine"


@dataclass(frozen=True)
class ExperimentConfig:
    condition: Condition = Condition.OPTIMUM
    model_times: tuple[float, ...] = CANONICAL_MODEL_TIMES
    systems: tuple[System, ...] = (System.DNN, System.PLDA)
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    folds: int = 2
    num_recordings: int = 40
    plda_threshold: float = 0.0
    cosine_threshold: float = 0.5
    collar: float = 0.0
    output_dir: str = "experiment_out"

    def __post_init__(self):
        object.__setattr__(self, "condition", Condition(self.condition))
        object.__setattr__(self, "systems", tuple(System(s) for s in self.systems))
        object.__setattr__(self, "model_times", tuple(float(t) for t in self.model_times))
        if not self.model_times or any(not t > 0 for t in self.model_times):
            raise InvalidArgument("model times must all be positive")
        if self.folds != 2:
            raise InvalidArgument("only 2-fold cross-validation is supported")
        if self.num_recordings < 1:
            raise InvalidArgument("need at least one recording per fold")
        if not self.systems:
            raise InvalidArgument("no systems selected")
        if self.collar < 0:
            raise InvalidArgument("collar must be non-negative")

    @property
    def effective_sim(self) -> SimConfig:
        if self.condition is Condition.NONTARGET and self.sim.num_nontargets == 0:
            return replace(self.sim, num_nontargets=NONTARGET_SPEAKERS)
        return self.sim

    @property
    def tracking_mode(self) -> Mode:
        # with non-target speech present the tracker has to be allowed to say "none of them"
        return Mode.VERIFY if self.condition is Condition.NONTARGET else self.tracker.mode


@dataclass(frozen=True)
class ResultRow:
    condition: str
    system: str
    model_time: float
    fold: str
    der: float
    miss: float
    fa: float
    conf: float
    eer: float
    min_dcf: float
    n_recordings: int
    n_skipped: int

    def csv_values(self) -> list[str]:
        return [self.condition, self.system, f"{self.model_time:.1f}", self.fold,
                f"{self.der:.6f}", f"{self.miss:.6f}", f"{self.fa:.6f}", f"{self.conf:.6f}",
                f"{self.eer:.6f}", f"{self.min_dcf:.6f}", str(self.n_recordings),
                str(self.n_skipped)]


@dataclass
class ExperimentResult:
    rows: list[ResultRow]
    augment: dict[str, AugmentResult] = field(default_factory=dict)

    def row(self, system, model_time: float, fold: str = "avg") -> ResultRow:
        system = System(system).value
        for r in self.rows:
            if r.system == system and abs(r.model_time - model_time) < 1e-9 and r.fold == fold:
                return r
        raise KeyError((system, model_time, fold))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_values())
        return buf.getvalue()


def overlap_fold(recordings: Sequence[Recording], cfg: SimConfig, aug: AugmentConfig,
                 fold: int, seg_cfg: SegmenterConfig = SegmenterConfig()
                 ) -> tuple[list[Recording], dict[str, AugmentResult]]:
    """Augment every recording with overlap, then re-simulate its embeddings.

    Speaker prototypes are recovered exactly by regenerating the fold, so the
    re-embedded stream uses the same speakers as the original.
    """
    n = len(recordings)
    protos = fold_prototypes(cfg, fold, n)
    out, results = [], {}
    for r, rec in enumerate(recordings):
        g = fold * n + r
        res = augment_recording(rec.annotation, aug, np.random.default_rng([aug.seed, g]))
        missing = [s for s in (*rec.targets, *rec.nontargets) if s not in protos]
        if missing:
            raise InvalidArgument(f"no prototypes for {missing}")
        segs = embed_annotation(res.annotation, protos, cfg,
                                stream_rng(cfg.seed, g, STREAM_NOISE), seg_cfg)
        out.append(Recording(res.annotation, segs, rec.targets, rec.nontargets))
        results[rec.recording_id] = res
    return out, results


def enrolled_banks(recordings: Sequence[Recording], model_time: float
                   ) -> tuple[list[tuple[Recording, ModelBank]], list[str]]:
    ok, skipped = [], []
    for rec in recordings:
        try:
            ok.append((rec, build_bank(rec.segments, rec.annotation, rec.targets, model_time)))
        except InsufficientEnrollment as exc:
            log.warning("%s: skipped at model time %.1f s (%s)", rec.recording_id, model_time, exc)
            skipped.append(rec.recording_id)
    return ok, skipped


def fit_dnn(recordings: Sequence[Recording], cfg: ExperimentConfig, fold: int) -> NetworkParams:
    """Train one network on banks built at every configured model time."""
    pairs = []
    for mt in cfg.model_times:
        ok, _ = enrolled_banks(recordings, mt)
        pairs.extend((rec.segments, bank) for rec, bank in ok)
    if not pairs:
        raise InvalidArgument("no enrollable training recordings")
    rng = np.random.default_rng([cfg.train.seed, fold])
    data = build_training_set(pairs, cfg.train, rng)
    shape = NetworkShape(cfg.sim.b, cfg.sim.num_targets)
    params = init_network(shape, seed=cfg.train.seed + fold)
    trained, history = train(params, data, replace(cfg.train, seed=cfg.train.seed + fold))
    log.info("fold %d: trained on %d samples, final loss %.5f", fold, len(data),
             history[-1] if history else float("nan"))
    return trained


def _track(system: System, rec: Recording, bank: ModelBank, cfg: ExperimentConfig,
           dnn: NetworkParams | None, plda: PldaModel | None) -> list[LabeledSegment]:
    mode = cfg.tracking_mode
    smoothing = cfg.tracker.smoothing
    if system is System.DNN:
        return track_stream(dnn, bank, rec.segments,
                            TrackerConfig(mode, cfg.tracker.threshold, smoothing))
    if system is System.PLDA:
        return plda_track(plda, bank, rec.segments, mode, cfg.plda_threshold, smoothing)
    return cosine_track(bank, rec.segments, mode, cfg.cosine_threshold, smoothing,
                        center=plda.mean)


def _summary(reports: list[DerReport], trials: list[TrialScore]):
    pooled = DerReport.combine(reports)
    t = pooled.total
    return (pooled.der, pooled.missed / t, pooled.false_alarm / t, pooled.confusion / t,
            compute_eer(trials), compute_min_dcf(trials))


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    sim = cfg.effective_sim
    out_dir = Path(cfg.output_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    folds = [gen_fold(sim, k, cfg.num_recordings) for k in range(cfg.folds)]
    aug_results: dict[str, AugmentResult] = {}
    if cfg.condition is Condition.OVERLAP:
        for k in range(cfg.folds):
            folds[k], res = overlap_fold(folds[k], sim, cfg.augment, k)
            aug_results.update(res)

    # (system, model_time) -> per-fold summaries
    per_fold: dict[tuple[System, float], list[tuple]] = {}
    for ev in range(cfg.folds):
        tr = 1 - ev
        fold_dir = out_dir / f"fold{ev}"
        if write:
            fold_dir.mkdir(exist_ok=True)
            write_rttm({r.recording_id: r.annotation for r in folds[ev]}, fold_dir / "ref.rttm")
        plda = fit_plda_from_recordings([r.segments for r in folds[tr]])
        dnn = fit_dnn(folds[tr], cfg, tr) if System.DNN in cfg.systems else None
        if write:
            plda.save(fold_dir / "plda.txt")
            if dnn is not None:
                dnn.save(fold_dir / "dnn.ckpt")
        for mt in cfg.model_times:
            ok, skipped = enrolled_banks(folds[ev], mt)
            if not ok:
                raise InvalidArgument(f"fold {ev}: no enrollable recording at {mt} s")
            for system in cfg.systems:
                reports, trials, hyps = [], [], {}
                for rec, bank in ok:
                    labeled = _track(system, rec, bank, cfg, dnn, plda)
                    hyp = merge_contiguous(labeled)
                    hyps[rec.recording_id] = hyp
                    ref = rec.annotation.restricted_to(rec.targets)
                    reports.append(compute_der(ref, hyp, collar=cfg.collar))
                    trials.extend(generate_trials(rec.recording_id, rec.segments,
                                                  bank.speakers, labeled))
                if write:
                    tag = f"{system.value}_{mt:.1f}"
                    write_rttm(hyps, fold_dir / f"hyp_{tag}.rttm")
                    write_trials(trials, fold_dir / f"trials_{tag}.txt")
                per_fold.setdefault((system, mt), []).append(
                    (ev, _summary(reports, trials), len(ok), len(skipped)))

    rows = []
    for system in cfg.systems:
        for mt in cfg.model_times:
            entries = per_fold[(system, mt)]
            for ev, vals, n_ok, n_skip in entries:
                rows.append(ResultRow(cfg.condition.value, system.value, mt, str(ev),
                                      *vals, n_ok, n_skip))
            avg = np.mean([vals for _, vals, _, _ in entries], axis=0)
            rows.append(ResultRow(cfg.condition.value, system.value, mt, "avg",
                                  *(float(v) for v in avg),
                                  sum(e[2] for e in entries), sum(e[3] for e in entries)))
    result = ExperimentResult(rows, aug_results)
    if write:
        (out_dir / "results.csv").write_text(result.to_csv(), encoding="utf-8")
        report = {"condition": cfg.condition.value, "num_recordings": cfg.num_recordings,
                  "seed": sim.seed}
        for r in rows:
            if r.fold == "avg":
                key = f"{r.system}.{r.model_time:.1f}"
                report[f"{key}.der"] = f"{r.der:.6f}"
                report[f"{key}.eer"] = f"{r.eer:.6f}"
                report[f"{key}.min_dcf"] = f"{r.min_dcf:.6f}"
                report[f"{key}.n_skipped"] = r.n_skipped
        if aug_results:
            vals = [a.achieved for a in aug_results.values()]
            report["augment.target"] = cfg.augment.target
            report["augment.achieved_mean"] = f"{np.mean(vals):.6f}"
            report["augment.achieved_min"] = f"{np.min(vals):.6f}"
            write_sidecar(aug_results, out_dir / "overlap_insertions.txt")
        write_report(report, out_dir / "report.txt")
    return result
