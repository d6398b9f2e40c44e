import numpy as np
import pytest

from trackforge.core import DimensionMismatch, InvalidArgument, ParseError, TimeInterval
from trackforge.simulator import (
    SimConfig,
    SpeakerPrototype,
    embed_annotation,
    gen_conversation,
    gen_embedding,
    gen_fold,
    gen_speakers,
    load_embeddings,
    write_embeddings,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        SimConfig(b=7)
    with pytest.raises(InvalidArgument):
        SimConfig(sigma_w=0)


def test_gen_speakers():
    cfg = SimConfig()
    a = gen_speakers(2, cfg, rng(5))
    b = gen_speakers(2, cfg, rng(5))
    assert all(np.array_equal(x.mean, y.mean) for x, y in zip(a, b))
    many = gen_speakers(500, cfg, rng(1))
    std = np.std(np.concatenate([p.mean for p in many]))
    assert 2.7 <= std <= 3.3
    one = gen_speakers(1, SimConfig(b=8), rng())
    assert len(one) == 1 and one[0].mean.shape == (8,)
    with pytest.raises(InvalidArgument):
        gen_speakers(0, cfg, rng())


def test_conversation_targets_only():
    cfg = SimConfig()
    tg = gen_speakers(2, cfg, rng(1), prefix="t")
    a = gen_conversation(tg, cfg, rng(2))
    assert set(a.speakers()) == {"t0", "t1"}
    # no cross-speaker overlap without overlap_fraction
    es = a.entries
    for x, y in zip(es, es[1:]):
        assert y.interval.start >= x.interval.end - 1e-9
    for spk in ("t0", "t1"):
        assert min(e.interval.start for e in es if e.speaker == spk) < 15.0
    speech = sum(e.interval.duration() for e in es)
    assert speech <= cfg.duration + cfg.turn_range[1]


def test_conversation_with_nontargets():
    cfg = SimConfig(num_nontargets=2)
    tg = gen_speakers(2, cfg, rng(1), prefix="t")
    nt = gen_speakers(2, cfg, rng(3), prefix="n")
    for seed in range(10):
        a = gen_conversation(tg, cfg, rng(seed), nt)
        assert {"n0", "n1"} <= set(a.speakers())
        assert a.speakers()[:2] == ["t0", "t1"]


def test_conversation_with_overlap_is_valid():
    cfg = SimConfig(overlap_fraction=0.5)
    tg = gen_speakers(2, cfg, rng(1))
    a = gen_conversation(tg, cfg, rng(4))
    es = a.entries
    assert any(y.interval.start < x.interval.end - 1e-9 for x, y in zip(es, es[1:]))


def test_gen_embedding_statistics():
    cfg = SimConfig()
    p = {p.speaker: p for p in gen_speakers(2, cfg, rng(0))}
    g = rng(9)
    w = TimeInterval(0, 1)
    draws = np.stack([gen_embedding(w, {"spk0": 1.0}, p, cfg, g) for _ in range(1000)])
    assert np.all(np.abs(draws.mean(0) - p["spk0"].mean) <= cfg.sigma_w * 3.3 / np.sqrt(1000))
    quiet = SimConfig(sigma_w=1e-9)
    mid = gen_embedding(w, {"spk0": 0.5, "spk1": 0.5}, p, quiet, g)
    np.testing.assert_allclose(mid, (p["spk0"].mean + p["spk1"].mean) / 2, atol=1e-6)
    with pytest.raises(InvalidArgument):
        gen_embedding(w, {}, p, cfg, g)


def test_separability_monte_carlo():
    cfg = SimConfig()
    g = rng(11)
    protos = gen_speakers(200, cfg, g)
    means = np.stack([p.mean for p in protos])
    hits = 0
    for _ in range(10000):
        i, j = g.choice(200, 2, replace=False)
        x = means[i] + g.normal(0, cfg.sigma_w, cfg.b)
        hits += np.linalg.norm(x - means[i]) < np.linalg.norm(x - means[j])
    assert hits / 10000 > 0.99


def test_fold_determinism_and_structure():
    cfg = SimConfig(duration=40)
    a = gen_fold(cfg, 0, 3)
    b = gen_fold(cfg, 0, 3)
    for x, y in zip(a, b):
        assert x.annotation == y.annotation
        assert all(np.array_equal(s.vector, t.vector) for s, t in zip(x.segments, y.segments))
    other = gen_fold(cfg, 1, 3)
    assert not set(a[0].targets) & set(other[0].targets)
    for rec in a:
        assert [s.index for s in rec.segments] == list(range(len(rec.segments)))


def test_nontargets_borrowed_from_fold():
    cfg = SimConfig(duration=40, num_nontargets=2)
    recs = gen_fold(cfg, 0, 4)
    all_targets = {s for r in recs for s in r.targets}
    for r in recs:
        assert len(r.nontargets) == 2
        assert set(r.nontargets) <= all_targets - set(r.targets)


def test_changing_noise_seed_keeps_speakers():
    # independent streams: conversation structure depends only on its own stream
    a = gen_fold(SimConfig(duration=30, sigma_w=1.0), 0, 2)
    b = gen_fold(SimConfig(duration=30, sigma_w=2.0), 0, 2)
    assert a[0].annotation == b[0].annotation


def test_embedding_round_trip(tmp_path):
    recs = gen_fold(SimConfig(duration=20), 0, 2)
    data = {r.recording_id: r.segments for r in recs}
    path = tmp_path / "emb.tsv"
    write_embeddings(data, path)
    back = load_embeddings(path)
    assert set(back) == set(data)
    for rec, segs in data.items():
        assert len(back[rec]) == len(segs)
        for s, t in zip(segs, back[rec]):
            assert s.interval == t.interval
            np.testing.assert_array_equal(s.vector, t.vector)


def test_load_embeddings_errors(tmp_path):
    p = tmp_path / "e.tsv"
    p.write_text("")
    assert load_embeddings(p) == {}
    v32 = ",".join(["0.5"] * 32)
    v31 = ",".join(["0.5"] * 31)
    p.write_text(f"r\t0\t1\t{v32}\nr\t0.5\t1.5\t{v31}\n")
    with pytest.raises(DimensionMismatch, match="line 2"):
        load_embeddings(p)
    p.write_text(f"# comment\nr\t0\t1\t{v32}\nr\tx\t1.5\t{v32}\n")
    with pytest.raises(ParseError) as err:
        load_embeddings(p)
    assert err.value.line == 3
    p.write_text(f"r\t1\t2\t{v32}\nr\t0\t1\t{v32}\nr\t0.5\t1.5\t{v32}\n")
    segs = load_embeddings(p)["r"]
    assert len(segs) == 3 and [s.interval.start for s in segs] == [0, 0.5, 1]


def test_embed_annotation_uses_prototypes():
    cfg = SimConfig(sigma_w=1e-9)
    protos = {p.speaker: p for p in gen_speakers(2, cfg, rng(0))}
    from helpers import ann
    a = ann((0, 2, "spk0"), (2.5, 4, "spk1"))
    segs = embed_annotation(a, protos, cfg, rng(1))
    for s in segs:
        (spk,) = s.truth
        np.testing.assert_allclose(s.vector, protos[spk].mean, atol=1e-6)
    assert isinstance(protos["spk0"], SpeakerPrototype)
