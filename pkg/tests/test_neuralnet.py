import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import bank, seg
from trackforge.core import DimensionMismatch, InvalidArgument, ParseError
from trackforge.modelgen import build_bank
from trackforge.neuralnet import (
    LAYERS,
    InvalidShape,
    NetworkParams,
    NetworkShape,
    TrainConfig,
    TrainingSample,
    TrainingSet,
    assemble_input,
    bce_loss,
    build_training_set,
    finite_difference_check,
    forward,
    gradcheck,
    gradients,
    init_network,
    layer_output_shapes,
    permutation_samples,
    score_stream,
    train,
)
from trackforge.simulator import SimConfig, gen_fold


def naive_forward(params, x):
    """Loop-by-loop evaluation of the network for one (S+1, b) input."""
    h = np.asarray(x, float)
    for name in ("conv1", "conv2", "conv3"):
        w, bias = params.weights[name], params.biases[name]
        F, C, K = w.shape
        L = h.shape[1] - K + 1
        out = np.zeros((F, L))
        for f in range(F):
            for pos in range(L):
                acc = bias[f]
                for c in range(C):
                    for k in range(K):
                        acc += w[f, c, k] * h[c, pos + k]
                out[f, pos] = max(acc, 0.0)
        h = out
    v = h.reshape(-1)
    for name in ("dense1", "dense2"):
        v = np.maximum(v @ params.weights[name] + params.biases[name], 0.0)
    z = v @ params.weights["dense3"] + params.biases["dense3"]
    return 1.0 / (1.0 + np.exp(-z))


def test_shape_validation():
    with pytest.raises(InvalidShape):
        NetworkShape(7, 2)
    with pytest.raises(InvalidShape):
        NetworkShape(8, 0)
    with pytest.raises(InvalidArgument):
        init_network(NetworkShape(7, 1))


def test_init_examples():
    a = init_network(NetworkShape(32, 2), seed=3)
    b = init_network(NetworkShape(32, 2), seed=3)
    assert np.array_equal(a.flat(), b.flat())
    assert a.weights["conv1"].size == 72
    assert a.weights["dense1"].shape == (52, 64)
    small = init_network(NetworkShape(8, 1))
    assert small.weights["dense1"].shape == (2, 32)
    assert all(np.all(small.biases[k] == 0) for k in LAYERS)


def test_assemble_input():
    x = seg(0, 0, 1, np.arange(8.0))
    inp = assemble_input(x, bank(("A", np.ones(8)), ("B", np.zeros(8))))
    assert inp.shape == (3, 8) and inp.size == 24
    assert np.all(inp[2] == 0)
    assert assemble_input(x, [np.ones(8)]).shape == (2, 8)
    with pytest.raises(DimensionMismatch):
        assemble_input(x, [np.ones(7)])


def test_forward_matches_naive_oracle():
    shape = NetworkShape(12, 2)
    p = init_network(shape, seed=1)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.normal(size=(3, 12))
        np.testing.assert_allclose(forward(p, x), naive_forward(p, x), rtol=1e-12, atol=1e-14)


def test_forward_examples():
    shape = NetworkShape(32, 2)
    zero = init_network(shape).with_flat(np.zeros(init_network(shape).flat().size))
    x = np.random.default_rng(0).normal(size=(3, 32))
    np.testing.assert_array_equal(forward(zero, x), [0.5, 0.5])
    p = init_network(shape, 4)
    assert layer_output_shapes(p, x) == [(3, 32), (8, 30), (4, 28), (2, 26), (64,), (32,), (2,)]
    s = forward(p, 100 * x)
    assert np.all((s > 0) & (s < 1))
    with pytest.raises(DimensionMismatch):
        forward(p, np.zeros((2, 32)))
    batch = forward(p, np.stack([x, 2 * x]))
    assert batch.shape == (2, 2)
    np.testing.assert_allclose(batch[0], forward(p, x))


@pytest.mark.parametrize("b", [8, 16, 32, 64])
@pytest.mark.parametrize("S", [1, 2, 3])
def test_shape_audit(b, S):
    p = init_network(NetworkShape(b, S))
    shapes = layer_output_shapes(p, np.zeros((S + 1, b)))
    sizes = [math.prod(s) for s in shapes]
    assert sizes == [b * (S + 1), (b - 2) * S ** 3, (b - 4) * S ** 2, (b - 6) * S,
                     32 * S, 16 * S, S]


def test_bce_examples():
    assert bce_loss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2))
    assert bce_loss([1.0, 0.0], [1, 0]) <= 1e-6
    assert bce_loss([1e-7], [1]) == pytest.approx(-math.log(1e-7), rel=1e-9)
    assert bce_loss([0.0], [1]) == pytest.approx(16.118, abs=1e-3)


def test_gradcheck_b10_s2():
    res = gradcheck(10, 2, seed=7)
    assert res.max_rel_error < 1e-4
    assert res.checked > 0.9 * (res.checked + res.skipped)


def test_gradcheck_batch_with_overlap_targets():
    shape = NetworkShape(9, 2)
    p = init_network(shape, seed=2)
    rng = np.random.default_rng(5)
    data = TrainingSet(rng.normal(size=(4, 3, 9)), np.array([[1, 1], [0, 0], [1, 0], [0, 1.0]]))
    assert finite_difference_check(p, data).max_rel_error < 1e-4


def test_duplicate_sample_gradient_equals_single():
    shape = NetworkShape(10, 2)
    p = init_network(shape, 1)
    s = TrainingSample(np.random.default_rng(1).normal(size=(3, 10)), np.array([1.0, 0.0]))
    g1, g2 = gradients(p, [s]).flat(), gradients(p, [s, s]).flat()
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_zero_input_gives_zero_conv_weight_gradients():
    p = init_network(NetworkShape(10, 2), 1)
    g = gradients(p, [TrainingSample(np.zeros((3, 10)), np.array([1.0, 0.0]))])
    for name in ("conv1", "conv2", "conv3"):
        assert np.all(g.weights[name] == 0)


def test_clamped_outputs_get_no_gradient():
    p = init_network(NetworkShape(8, 1), 0)
    p.weights["dense3"][:] = 0
    p.biases["dense3"][:] = 40.0      # sigmoid saturates above the clamp
    g = gradients(p, [TrainingSample(np.ones((2, 8)), np.array([0.0]))])
    assert np.all(g.flat() == 0)


def test_permutation_samples_examples():
    x = np.zeros(4)
    models = np.array([[1.0] * 4, [2.0] * 4])
    out = permutation_samples(x, models, ["A", "B"], frozenset({"A"}))
    assert len(out) == 2
    (i0, t0), (i1, t1) = out
    np.testing.assert_array_equal(t0, [1, 0])
    np.testing.assert_array_equal(t1, [0, 1])
    np.testing.assert_array_equal(i1[1], models[1])


def _scan_dataset(S, p_zero, seed):
    cfg = SimConfig(duration=30)
    recs = gen_fold(cfg, 0, 2)
    shapes = []
    for r in recs:
        from trackforge.modelgen import build_bank as bb
        shapes.append((r.segments[:20], bb(r.segments, r.annotation, r.targets, 3.0)))
    return shapes, build_training_set(shapes, TrainConfig(p_zero=p_zero),
                                      np.random.default_rng(seed))


def test_training_set_permutation_and_zero_pad_scan():
    pairs, data = _scan_dataset(2, 0.5, 0)
    S = 2
    n_base = sum(len(s) for s, _ in pairs) * math.factorial(S)
    zero = np.array([[np.all(data.inputs[i, c + 1] == 0) for c in range(S)]
                     for i in range(len(data))])
    assert len(data) - zero.any(axis=1).sum() == n_base
    # every zeroed channel has target 0
    assert np.all(data.targets[zero] == 0)
    # each base sample comes with all S! permutations of the bank
    base = data.inputs[~zero.any(axis=1)]
    tbase = data.targets[~zero.any(axis=1)]
    seen = {(b.tobytes(), t.tobytes()) for b, t in zip(base, tbase)}
    for inp, tgt in zip(base, tbase):
        for perm in itertools.permutations(range(S)):
            q = np.concatenate([inp[:1], inp[1:][list(perm)]])
            assert (q.tobytes(), tgt[list(perm)].tobytes()) in seen


def test_training_set_errors():
    b2 = bank(("A", np.ones(8)), ("B", np.zeros(8)))
    b1 = bank(("A", np.ones(8)))
    s = [seg(0, 0, 1, np.ones(8), {"A"})]
    with pytest.raises(InvalidArgument):
        build_training_set([(s, b2), (s, b1)], TrainConfig(), np.random.default_rng())
    data = build_training_set([(s, b2)], TrainConfig(p_zero=0.0), np.random.default_rng())
    assert len(data) == 2


def _separable_set(n=2000, seed=0):
    cfg = SimConfig()
    recs = gen_fold(cfg, 0, 12)
    pairs = [(r.segments, build_bank(r.segments, r.annotation, r.targets, 10.5)) for r in recs]
    data = build_training_set(pairs, TrainConfig(), np.random.default_rng(seed))
    idx = np.random.default_rng(seed).choice(len(data), size=n, replace=False)
    return data.subset(np.sort(idx))


def test_training_converges_and_is_deterministic():
    data = _separable_set()
    p0 = init_network(NetworkShape(32, 2), seed=0)
    p1, h1 = train(p0, data, TrainConfig())
    _, h2 = train(p0, data, TrainConfig())
    assert h1 == h2
    assert len(h1) == 30 and h1[-1] < 0.15
    smooth = np.convolve(h1, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-12)
    assert p1.all_finite()


def test_zero_learning_rate_keeps_params():
    data = _separable_set(200)
    p0 = init_network(NetworkShape(32, 2), seed=0)
    p1, hist = train(p0, data, TrainConfig(lr=0.0, epochs=3))
    assert np.array_equal(p0.flat(), p1.flat())
    assert hist[0] == hist[1] == hist[2]


def test_checkpoint_round_trip(tmp_path):
    p = init_network(NetworkShape(10, 2), 5)
    path = tmp_path / "net.ckpt"
    p.save(path)
    q = NetworkParams.load(path, NetworkShape(10, 2))
    assert np.array_equal(p.flat(), q.flat())
    with pytest.raises(DimensionMismatch):
        NetworkParams.load(path, NetworkShape(12, 2))
    path.write_text("garbage\n")
    with pytest.raises(ParseError):
        NetworkParams.load(path)


def test_score_stream_matches_single_forward():
    p = init_network(NetworkShape(8, 2), 0)
    bk = bank(("A", np.ones(8)), ("B", -np.ones(8)))
    stream = [seg(i, i * 0.5, i * 0.5 + 1, np.full(8, i)) for i in range(4)]
    sc = score_stream(p, bk, stream)
    for s, row in zip(stream, sc):
        np.testing.assert_allclose(row, forward(p, assemble_input(s, bk)))
    with pytest.raises(DimensionMismatch):
        score_stream(init_network(NetworkShape(9, 2)), bk, stream)


@settings(max_examples=25, deadline=None)
@given(st.integers(8, 14), st.integers(1, 3), st.integers(0, 1000))
def test_outputs_in_open_unit_interval(b, S, seed):
    p = init_network(NetworkShape(b, S), seed)
    x = np.random.default_rng(seed).normal(scale=3, size=(4, S + 1, b))
    out = forward(p, x)
    assert out.shape == (4, S) and np.all((out > 0) & (out < 1))
