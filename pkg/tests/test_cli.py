import io
import subprocess
import sys

import pytest

from trackforge import cli
from trackforge.formats import parse_rttm, read_trials


class EventLog(io.StringIO):
    """stdout stand-in that records when each label line is written."""

    def __init__(self, events):
        super().__init__()
        self.events = events
        self._buf = ""

    def write(self, text):
        self._buf += text
        while "\n" in self._buf:
            line, self._buf = self._buf.split("\n", 1)
            if line and line.split("\t")[0].isdigit():
                self.events.append(("emit", int(line.split("\t")[0])))
        return super().write(text)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    code = cli.main(["simulate", "--output-dir", str(d), "--num-recordings", "3",
                     "--set", "sim.duration=40", "--set", "sim.b=8"])
    assert code == 0
    f0 = d / "fold0"
    ck = d / "net.npz"
    assert cli.main(["train", "--embeddings", str(f0 / "embeddings.tsv"), "--rttm",
                     str(f0 / "ref.rttm"), "--out", str(ck), "--epochs", "2"]) == 0
    plda = d / "plda.npz"
    assert cli.main(["fit-plda", "--embeddings", str(f0 / "embeddings.tsv"), "--rttm",
                     str(f0 / "ref.rttm"), "--out", str(plda)]) == 0
    return d, ck, plda


def _track_args(d, *extra):
    f1 = d / "fold1"
    rec = sorted(parse_rttm(f1 / "ref.rttm"))[0]
    return ["track", "--embeddings", str(f1 / "embeddings.tsv"), "--rttm",
            str(f1 / "ref.rttm"), "--recording", rec, *extra], rec


def test_simulate_layout(corpus):
    d, _, _ = corpus
    for k in (0, 1):
        refs = parse_rttm(d / f"fold{k}" / "ref.rttm")
        assert len(refs) == 3
        assert (d / f"fold{k}" / "embeddings.tsv").stat().st_size > 0


def test_watch_emits_with_one_segment_lag(corpus, monkeypatch):
    d, ck, _ = corpus
    events = []
    real = cli.iter_embedding_lines

    def instrumented(lines, recording):
        for seg in real(lines, recording):
            events.append(("read", seg.index))
            yield seg

    monkeypatch.setattr(cli, "iter_embedding_lines", instrumented)
    monkeypatch.setattr(sys, "stdout", EventLog(events))
    args, _ = _track_args(d, "--checkpoint", str(ck), "--watch")
    assert cli.main(args) == 0
    reads = {i: k for k, (kind, i) in enumerate(events) if kind == "read"}
    emits = [(k, i) for k, (kind, i) in enumerate(events) if kind == "emit"]
    assert [i for _, i in emits] == sorted(reads)         # each label emitted once, in order
    for k, i in emits:
        if i + 2 in reads:
            assert k < reads[i + 2]


def test_track_outputs_and_evaluate(corpus, tmp_path, capsys):
    d, ck, plda = corpus
    hyp, trials = tmp_path / "hyp.rttm", tmp_path / "trials.txt"
    args, rec = _track_args(d, "--checkpoint", str(ck), "--out", str(hyp),
                            "--trials", str(trials))
    assert cli.main(args) == 0
    assert rec in parse_rttm(hyp)
    assert len(read_trials(trials)) > 0
    ref = d / "fold1" / "ref.rttm"
    capsys.readouterr()
    assert cli.main(["evaluate", "--ref", str(ref), "--hyp", str(ref)]) == 0
    assert "DER=0.0000" in capsys.readouterr().out
    assert cli.main(["evaluate", "--ref", str(ref), "--hyp", str(hyp), "--trials",
                     str(trials), "--mapping", "optimal", "--collar", "0.25"]) == 0
    out = capsys.readouterr().out
    assert "EER=" in out and "MINDCF=" in out


def test_track_verify_writes_unk(corpus, tmp_path):
    d, _, plda = corpus
    hyp = tmp_path / "hyp.rttm"
    # an unreachable threshold rejects every segment
    args, _ = _track_args(d, "--plda", str(plda), "--mode", "verify", "--threshold", "1e9",
                          "--out", str(hyp))
    assert cli.main(args) == 0
    lines = hyp.read_text().splitlines()
    assert lines and all(line.split()[7] == "UNK" for line in lines)


def test_augment_overlap(corpus, tmp_path, capsys):
    d, _, _ = corpus
    out, side = tmp_path / "aug.rttm", tmp_path / "ins.txt"
    assert cli.main(["augment-overlap", "--rttm", str(d / "fold0" / "ref.rttm"), "--out",
                     str(out), "--sidecar", str(side), "--target", "0.3"]) == 0
    achieved = [float(tok.split("=")[1]) for line in capsys.readouterr().out.splitlines()
                for tok in line.split() if tok.startswith("achieved=")]
    assert len(achieved) == 3 and all(abs(a - 0.3) <= 0.02 for a in achieved)
    assert side.read_text().count("INSERT") > 0


def test_exit_codes(corpus, tmp_path):
    d, ck, plda = corpus
    assert cli.main(["gradcheck", "--seed", "1"]) == 0
    with pytest.raises(SystemExit) as exc:
        cli.main(["nonsense"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["evaluate", "--ref"])
    assert exc.value.code == 1
    args, _ = _track_args(d, "--checkpoint", str(ck), "--plda", str(plda))
    assert cli.main(args) == 1
    assert cli.main(["evaluate", "--ref", str(tmp_path / "missing.rttm"), "--hyp", "x"]) == 2
    bad = tmp_path / "bad.rttm"
    bad.write_text("SPEAKER r 1 0 -1 <NA> <NA> A <NA> <NA>\n")
    assert cli.main(["evaluate", "--ref", str(bad), "--hyp", str(bad)]) == 2
    assert cli.main(["simulate", "--output-dir", str(tmp_path), "--set", "sim.nope=1"]) == 2
    assert cli.main(["simulate", "--output-dir", str(tmp_path), "--set", "novalue"]) == 1


def test_gradcheck_failure_exit(monkeypatch):
    monkeypatch.setattr(cli, "GRADCHECK_TOL", 0.0)
    assert cli.main(["gradcheck"]) == 3


def test_config_file_and_set_override(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("sim.duration=30\nsim.b=8\n")
    out = tmp_path / "o"
    assert cli.main(["simulate", "--config", str(cfg), "--set", "sim.b=9",
                     "--output-dir", str(out), "--num-recordings", "1"]) == 0
    first = (out / "fold0" / "embeddings.tsv").read_text().splitlines()[0]
    assert len(first.split("\t")[3].split(",")) == 9
    assert max(a.duration for a in parse_rttm(out / "fold0" / "ref.rttm").values()) < 40


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "trackforge.cli", "gradcheck", "--seed", "2"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "max_rel_error=" in res.stdout
