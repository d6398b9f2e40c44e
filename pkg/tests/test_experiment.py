import csv
import io
from dataclasses import replace

import pytest

from trackforge.core import InvalidArgument
from trackforge.experiment import CSV_COLUMNS, Condition, ExperimentConfig, run_experiment
from trackforge.formats import parse_rttm, read_config, read_trials
from trackforge.metrics import compute_eer
from trackforge.neuralnet import TrainConfig
from trackforge.simulator import SimConfig


def small(tmp_path, **kw):
    base = ExperimentConfig(num_recordings=3, sim=SimConfig(b=8, duration=40.0),
                            train=TrainConfig(epochs=2), systems=("dnn", "plda", "cosine"),
                            output_dir=str(tmp_path))
    return replace(base, **kw)


@pytest.fixture(scope="module")
def optimum(tmp_path_factory):
    d = tmp_path_factory.mktemp("exp")
    cfg = small(d)
    return cfg, run_experiment(cfg), d


def test_csv_shape(optimum):
    cfg, res, d = optimum
    rows = list(csv.reader(io.StringIO(res.to_csv())))
    assert rows[0] == list(CSV_COLUMNS)
    body = rows[1:]
    # per system and model time: one row per fold plus the average
    assert len(body) == 3 * 3 * 3
    assert {r[3] for r in body} == {"0", "1", "avg"}
    assert (d / "results.csv").read_text() == res.to_csv()


def test_average_row_is_fold_mean(optimum):
    _, res, _ = optimum
    for sys in ("dnn", "plda", "cosine"):
        for mt in (3.0, 5.5, 10.5):
            f0, f1, avg = res.row(sys, mt, "0"), res.row(sys, mt, "1"), res.row(sys, mt)
            assert avg.der == pytest.approx((f0.der + f1.der) / 2)
            assert avg.eer == pytest.approx((f0.eer + f1.eer) / 2)
            assert avg.n_recordings + avg.n_skipped == 6


def test_artifacts_round_trip(optimum):
    _, res, d = optimum
    report = read_config(d / "report.txt")
    assert report["condition"] == "optimum"
    for k in (0, 1):
        fd = d / f"fold{k}"
        assert len(parse_rttm(fd / "ref.rttm")) == 3
        assert (fd / "plda.txt").exists() and (fd / "dnn.ckpt").exists()
        trials = read_trials(fd / "trials_plda_10.5.txt")
        assert compute_eer(trials) == pytest.approx(res.row("plda", 10.5, str(k)).eer, abs=1e-6)
        assert parse_rttm(fd / "hyp_dnn_3.0.rttm")


def test_deterministic(optimum, tmp_path):
    cfg, res, _ = optimum
    again = run_experiment(replace(cfg, output_dir=str(tmp_path)))
    assert again.to_csv() == res.to_csv()


def test_seed_changes_results(optimum, tmp_path):
    cfg, res, _ = optimum
    other = run_experiment(replace(cfg, sim=replace(cfg.sim, seed=99),
                                   output_dir=str(tmp_path)), write=False)
    assert other.to_csv() != res.to_csv()
    assert not any(tmp_path.iterdir())


def test_overlap_condition_writes_sidecar(tmp_path):
    res = run_experiment(small(tmp_path, condition=Condition.OVERLAP, systems=("plda",),
                               model_times=(10.5,)))
    assert len(res.augment) == 6
    assert all(abs(a.achieved - 0.18) <= 0.02 for a in res.augment.values())
    assert "augment.achieved_mean" in read_config(tmp_path / "report.txt")
    assert (tmp_path / "overlap_insertions.txt").exists()


def test_nontarget_condition_mixes_speakers(tmp_path):
    cfg = small(tmp_path, condition="nontarget", systems=("plda",), model_times=(10.5,))
    assert cfg.effective_sim.num_nontargets == 2
    run_experiment(cfg)
    ref = parse_rttm(tmp_path / "fold0" / "ref.rttm")
    assert all(len({e.speaker for e in a.entries}) == 4 for a in ref.values())


@pytest.mark.parametrize("kw", [{"folds": 3}, {"model_times": (0.0,)}, {"systems": ()},
                                {"num_recordings": 0}, {"collar": -1.0}])
def test_config_validation(kw):
    with pytest.raises(InvalidArgument):
        ExperimentConfig(**kw)
