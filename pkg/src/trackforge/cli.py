"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 failed acceptance
check (``gradcheck``). Settings come from an optional flat ``key=value``
config file (``--config``) with dotted keys such as ``sim.b=32``; explicit
flags and ``--set key=value`` override the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

from .augment import AugmentConfig, augment_recording, write_sidecar
from .core import (
    EmbeddingSegment,
    LabeledSegment,
    ReferenceAnnotation,
    TimeInterval,
    TrackforgeError,
)
from .experiment import ExperimentConfig, run_experiment
from .formats import (
    apply_overrides,
    parse_rttm,
    read_config,
    read_trials,
    write_rttm,
    write_trials,
)
from .metrics import DerReport, compute_der, compute_eer, compute_min_dcf, generate_trials
from .modelgen import build_bank
from .neuralnet import (
    NetworkParams,
    NetworkShape,
    TrainConfig,
    build_training_set,
    gradcheck,
    init_network,
    train,
)
from .plda import PldaModel, fit_plda_from_recordings, plda_scorer
from .segmenter import SegmenterConfig, label_segments
from .simulator import SimConfig, gen_fold, load_embeddings, write_embeddings
from .tracker import Mode, OnlineTracker, TrackerConfig, dnn_scorer, merge_contiguous

log = logging.getLogger("trackforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _settings(args) -> dict[str, str]:
    values = read_config(args.config) if args.config else {}
    for item in args.set or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def _section(values: dict[str, str], prefix: str) -> dict[str, str]:
    return {k: v for k, v in values.items() if k.startswith(prefix + ".")}


def attach_truth(segments: Sequence[EmbeddingSegment], annotation: ReferenceAnnotation,
                 cfg: SegmenterConfig = SegmenterConfig()) -> list[EmbeddingSegment]:
    """Label ingested segments with the speakers the reference says are active."""
    labeled = label_segments([(s.index, s.interval) for s in segments], annotation, cfg)
    return [EmbeddingSegment(s.index, s.interval, s.vector, truth)
            for s, (_, _, truth) in zip(segments, labeled)]


def _targets(annotation: ReferenceAnnotation, n: int) -> list[str]:
    # the first n speakers to talk are the tracked ones
    return annotation.speakers()[:n]


def _load_corpus(emb_path, rttm_path) -> list[tuple[str, list[EmbeddingSegment], ReferenceAnnotation]]:
    streams = load_embeddings(emb_path)
    refs = parse_rttm(rttm_path)
    missing = sorted(set(streams) - set(refs))
    if missing:
        raise TrackforgeError(f"no reference for recordings {missing[:5]}")
    return [(rec, attach_truth(streams[rec], refs[rec]), refs[rec]) for rec in sorted(streams)]


# subcommands

def cmd_simulate(args, values) -> int:
    sim = apply_overrides(SimConfig(), _section(values, "sim"), "sim.")
    if args.seed is not None:
        sim = replace(sim, seed=args.seed)
    out = Path(args.output_dir)
    for fold in range(args.folds):
        recs = gen_fold(sim, fold, args.num_recordings)
        d = out / f"fold{fold}"
        d.mkdir(parents=True, exist_ok=True)
        write_rttm({r.recording_id: r.annotation for r in recs}, d / "ref.rttm")
        write_embeddings({r.recording_id: r.segments for r in recs}, d / "embeddings.tsv")
        print(f"fold{fold}: {len(recs)} recordings -> {d}")
    return EXIT_OK


def cmd_augment(args, values) -> int:
    cfg = apply_overrides(AugmentConfig(), _section(values, "augment"), "augment.")
    if args.target is not None:
        cfg = replace(cfg, target=args.target)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    refs = parse_rttm(args.rttm)
    results = {}
    for i, rec in enumerate(sorted(refs)):
        results[rec] = augment_recording(refs[rec], cfg, np.random.default_rng([cfg.seed, i]))
        print(f"{rec} achieved={results[rec].achieved:.4f} status={results[rec].status}")
    write_rttm({rec: res.annotation for rec, res in results.items()}, args.out)
    if args.sidecar:
        write_sidecar(results, args.sidecar)
    return EXIT_OK


def cmd_train(args, values) -> int:
    cfg = apply_overrides(TrainConfig(), _section(values, "train"), "train.")
    for name in ("lr", "epochs", "batch_size", "seed", "p_zero"):
        if getattr(args, name) is not None:
            cfg = replace(cfg, **{name: getattr(args, name)})
    corpus = _load_corpus(args.embeddings, args.rttm)
    pairs = []
    for mt in args.model_time:
        for _, stream, ref in corpus:
            pairs.append((stream, build_bank(stream, ref, _targets(ref, args.speakers), mt)))
    data = build_training_set(pairs, cfg, np.random.default_rng(cfg.seed))
    b = corpus[0][1][0].dim
    params = init_network(NetworkShape(b, args.speakers), cfg.seed)
    params, history = train(params, data, cfg, log=log.info)
    params.save(args.out)
    print(f"samples={len(data)} final_loss={history[-1] if history else float('nan'):.6f}")
    return EXIT_OK


def cmd_fit_plda(args, values) -> int:
    corpus = _load_corpus(args.embeddings, args.rttm)
    model = fit_plda_from_recordings([stream for _, stream, _ in corpus])
    model.save(args.out)
    print(f"b={model.dim} speakers_fitted=ok -> {args.out}")
    return EXIT_OK


def iter_embedding_lines(lines: Iterable[str], recording: str) -> Iterator[EmbeddingSegment]:
    """Lazily parse one recording's segments, numbering them in arrival order."""
    idx = 0
    for line in lines:
        if not line.strip() or line.startswith("#"):
            continue
        rec, s, e, vec = line.rstrip("\r\n").split("\t")
        if rec != recording:
            continue
        yield EmbeddingSegment(idx, TimeInterval(float(s), float(e)),
                               np.array([float(v) for v in vec.split(",")]))
        idx += 1


def _format_label(seg: LabeledSegment) -> str:
    scores = ",".join(f"{s:.4f}" for s in seg.scores)
    return f"{seg.index}\t{seg.interval.start:.2f}\t{seg.interval.end:.2f}\t{seg.label}\t{scores}"


def watch(tracker: OnlineTracker, segments: Iterable[EmbeddingSegment],
          out: TextIO) -> list[LabeledSegment]:
    """Feed segments one by one and write each label as soon as it is final."""
    done = []
    for seg in segments:
        for lab in tracker.push(seg):
            out.write(_format_label(lab) + "\n")
            out.flush()
            done.append(lab)
    for lab in tracker.flush():
        out.write(_format_label(lab) + "\n")
        out.flush()
        done.append(lab)
    return done


def cmd_track(args, values) -> int:
    tcfg = apply_overrides(TrackerConfig(), _section(values, "tracker"), "tracker.")
    if args.mode is not None:
        tcfg = replace(tcfg, mode=Mode(args.mode))
    if args.threshold is not None:
        tcfg = replace(tcfg, threshold=args.threshold)
    if args.no_smoothing:
        tcfg = replace(tcfg, smoothing=False)
    if (args.checkpoint is None) == (args.plda is None):
        raise UsageError("give exactly one of --checkpoint or --plda")
    ref = parse_rttm(args.rttm).get(args.recording)
    if ref is None:
        raise TrackforgeError(f"recording {args.recording!r} not in {args.rttm}")
    # enrollment uses the labeled opening of the recording, read up front
    enroll = attach_truth(load_embeddings(args.embeddings).get(args.recording, []), ref)
    if not enroll:
        raise TrackforgeError(f"no embeddings for {args.recording!r}")
    bank = build_bank(enroll, ref, _targets(ref, args.speakers), args.model_time)
    if args.checkpoint:
        params = NetworkParams.load(args.checkpoint, NetworkShape(bank.dim, len(bank)))
        scorer = dnn_scorer(params, bank)
    else:
        scorer = plda_scorer(PldaModel.load(args.plda), bank)
    tracker = OnlineTracker(scorer, bank.speakers, tcfg)
    with open(args.embeddings, encoding="utf-8") as fh:
        segments = iter_embedding_lines(fh, args.recording)
        if args.watch:
            labeled = watch(tracker, segments, sys.stdout)
        else:
            labeled = list(tracker.run(segments))
    if args.out:
        write_rttm({args.recording: merge_contiguous(labeled)}, args.out)
    if args.trials:
        write_trials(generate_trials(args.recording, enroll, bank.speakers, labeled), args.trials)
    return EXIT_OK


def cmd_evaluate(args, values) -> int:
    refs = parse_rttm(args.ref)
    hyps = parse_rttm(args.hyp)
    reports = []
    for rec in sorted(refs):
        hyp = hyps.get(rec)
        entries = [] if hyp is None else [(e.interval, e.speaker) for e in hyp.entries]
        reports.append(compute_der(refs[rec], entries, collar=args.collar, mapping=args.mapping))
    pooled = DerReport.combine(reports)
    print(f"DER={pooled.der:.4f}")
    print(f"MISS={pooled.missed / pooled.total:.4f}")
    print(f"FA={pooled.false_alarm / pooled.total:.4f}")
    print(f"CONF={pooled.confusion / pooled.total:.4f}")
    if args.trials:
        trials = read_trials(args.trials)
        print(f"EER={compute_eer(trials):.4f}")
        print(f"MINDCF={compute_min_dcf(trials):.4f}")
    return EXIT_OK


def cmd_experiment(args, values) -> int:
    cfg = apply_overrides(ExperimentConfig(), values)
    changes = {}
    if args.condition:
        changes["condition"] = args.condition
    if args.systems:
        changes["systems"] = tuple(args.systems)
    if args.model_times:
        changes["model_times"] = tuple(args.model_times)
    if args.num_recordings is not None:
        changes["num_recordings"] = args.num_recordings
    if args.output_dir:
        changes["output_dir"] = args.output_dir
    if args.seed is not None:
        changes["sim"] = replace(cfg.sim, seed=args.seed)
    cfg = replace(cfg, **changes)
    t0 = time.perf_counter()
    result = run_experiment(cfg)
    sys.stdout.write(result.to_csv())
    log.info("experiment finished in %.1f s", time.perf_counter() - t0)
    return EXIT_OK


def cmd_gradcheck(args, values) -> int:
    res = gradcheck(args.b, args.S, args.seed)
    print(f"max_rel_error={res.max_rel_error:.3e} checked={res.checked} skipped={res.skipped}")
    return EXIT_OK if res.max_rel_error < GRADCHECK_TOL else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trackforge", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        return sp

    sp = common(sub.add_parser("simulate", help="simulate folds: RTTM + embedding files"))
    sp.add_argument("--output-dir", required=True)
    sp.add_argument("--num-recordings", type=int, default=40)
    sp.add_argument("--folds", type=int, default=2)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("augment-overlap", help="splice overlapped speech into an RTTM"))
    sp.add_argument("--rttm", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sidecar", help="record of the insertions, for undoing them")
    sp.add_argument("--target", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_augment)

    sp = common(sub.add_parser("train", help="train the scoring network"))
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--rttm", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--speakers", type=int, default=2, help="tracked speakers per recording")
    sp.add_argument("--model-time", type=float, nargs="+", default=[3.0, 5.5, 10.5])
    sp.add_argument("--lr", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--p-zero", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("fit-plda", help="fit the PLDA baseline"))
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--rttm", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit_plda)

    sp = common(sub.add_parser("track", help="label one recording online"))
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--rttm", required=True, help="reference used for enrollment")
    sp.add_argument("--recording", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--plda")
    sp.add_argument("--speakers", type=int, default=2)
    sp.add_argument("--model-time", type=float, default=10.5)
    sp.add_argument("--mode", choices=[m.value for m in Mode])
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--no-smoothing", action="store_true")
    sp.add_argument("--watch", action="store_true", help="print each label as soon as it is final")
    sp.add_argument("--out", help="hypothesis RTTM")
    sp.add_argument("--trials", help="write verification trials")
    sp.set_defaults(func=cmd_track)

    sp = common(sub.add_parser("evaluate", help="DER (and EER/minDCF) from RTTM and trials"))
    sp.add_argument("--ref", required=True)
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--trials")
    sp.add_argument("--collar", type=float, default=0.0)
    sp.add_argument("--mapping", choices=["identity", "optimal"], default="identity")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("experiment", help="full cross-validated experiment"))
    sp.add_argument("--condition", choices=["optimum", "nontarget", "overlap"])
    sp.add_argument("--systems", nargs="+", choices=["dnn", "plda", "cosine"])
    sp.add_argument("--model-times", type=float, nargs="+")
    sp.add_argument("--num-recordings", type=int)
    sp.add_argument("--output-dir")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_experiment)

    sp = common(sub.add_parser("gradcheck", help="finite-difference gradient audit"))
    sp.add_argument("--b", type=int, default=10)
    sp.add_argument("--S", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, _settings(args))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrackforgeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
