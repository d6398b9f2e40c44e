"""Speaker-tracking scoring network in plain numpy.

Input is ``S + 1`` channels of length ``b``: the segment embedding followed by
the ``S`` enrolled models. Three valid (unpadded, stride 1) kernel-3
convolutions shrink the length ``b -> b-2 -> b-4 -> b-6`` while the channel
count goes ``S+1 -> S**3 -> S**2 -> S``. The flattened ``(b-6)*S`` features
feed dense layers ``32S -> 16S -> S``; the last one is sigmoid, the rest ReLU.
One sigmoid score per bank slot.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DimensionMismatch, EmbeddingSegment, InvalidArgument, ModelBank, ParseError

KERNEL = 3
LAYERS = ("conv1", "conv2", "conv3", "dense1", "dense2", "dense3")
CONV_LAYERS = LAYERS[:3]
PROB_CLAMP = 1e-7
CHECKPOINT_MAGIC = "trackforge-net v1"


class InvalidShape(InvalidArgument):
    pass


@dataclass(frozen=True)
class NetworkShape:
    b: int
    S: int

    def __post_init__(self):
        if self.b < 8:
            raise InvalidShape(f"b={self.b}: need b >= 8 so the last conv keeps >= 2 taps")
        if self.S < 1:
            raise InvalidShape("need S >= 1")

    def param_shapes(self) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
        """Weight and bias shapes per layer. Conv weights are (filters, in_channels, taps),
        dense weights are (in_features, out_features)."""
        b, S = self.b, self.S
        return {
            "conv1": ((S ** 3, S + 1, KERNEL), (S ** 3,)),
            "conv2": ((S ** 2, S ** 3, KERNEL), (S ** 2,)),
            "conv3": ((S, S ** 2, KERNEL), (S,)),
            "dense1": (((b - 6) * S, 32 * S), (32 * S,)),
            "dense2": ((32 * S, 16 * S), (16 * S,)),
            "dense3": ((16 * S, S), (S,)),
        }

    def activation_sizes(self) -> list[int]:
        """Flattened output size of every layer, input first."""
        b, S = self.b, self.S
        return [b * (S + 1), (b - 2) * S ** 3, (b - 4) * S ** 2, (b - 6) * S,
                32 * S, 16 * S, S]


class NetworkParams:
    """Weights of the tracking network, shape-locked to a ``NetworkShape``."""

    def __init__(self, shape: NetworkShape, weights: dict[str, np.ndarray],
                 biases: dict[str, np.ndarray], seed: int = 0):
        self.shape = shape
        self.seed = seed
        expected = shape.param_shapes()
        for name in LAYERS:
            w, bias = weights[name], biases[name]
            if w.shape != expected[name][0] or bias.shape != expected[name][1]:
                raise DimensionMismatch(
                    f"{name}: got {w.shape}/{bias.shape}, expected {expected[name]}")
        self.weights = {k: np.asarray(weights[k], dtype=float) for k in LAYERS}
        self.biases = {k: np.asarray(biases[k], dtype=float) for k in LAYERS}

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.shape, {k: v.copy() for k, v in self.weights.items()},
                             {k: v.copy() for k, v in self.biases.items()}, self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([self.weights[k].ravel(), self.biases[k].ravel()])
                               for k in LAYERS])

    def with_flat(self, vec: np.ndarray) -> "NetworkParams":
        weights, biases = {}, {}
        pos = 0
        for name, (ws, bs) in self.shape.param_shapes().items():
            nw, nb = math.prod(ws), math.prod(bs)
            weights[name] = vec[pos:pos + nw].reshape(ws).copy()
            pos += nw
            biases[name] = vec[pos:pos + nb].reshape(bs).copy()
            pos += nb
        return NetworkParams(self.shape, weights, biases, self.seed)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in [*self.weights.values(), *self.biases.values()])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{CHECKPOINT_MAGIC} b={self.shape.b} S={self.shape.S} seed={self.seed}\n")
            for name in LAYERS:
                vals = np.concatenate([self.weights[name].ravel(), self.biases[name].ravel()])
                fh.write(name + " " + " ".join(repr(float(v)) for v in vals) + "\n")

    @classmethod
    def load(cls, path, expect: NetworkShape | None = None) -> "NetworkParams":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
            raise ParseError("not a trackforge-net checkpoint", 1)
        try:
            kv = dict(tok.split("=", 1) for tok in lines[0][len(CHECKPOINT_MAGIC):].split())
            shape = NetworkShape(int(kv["b"]), int(kv["S"]))
            seed = int(kv.get("seed", 0))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad header: {exc}", 1) from None
        if expect is not None and expect != shape:
            raise DimensionMismatch(f"checkpoint has b={shape.b} S={shape.S}, "
                                    f"expected b={expect.b} S={expect.S}")
        weights, biases = {}, {}
        shapes = shape.param_shapes()
        rows = {}
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            name, *vals = line.split()
            if name not in shapes:
                raise ParseError(f"unknown layer {name!r}", lineno)
            try:
                rows[name] = (lineno, np.array([float(v) for v in vals]))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
        for name in LAYERS:
            if name not in rows:
                raise ParseError(f"missing layer {name}")
            lineno, vec = rows[name]
            ws, bs = shapes[name]
            nw = math.prod(ws)
            if vec.size != nw + math.prod(bs):
                raise DimensionMismatch(f"line {lineno}: layer {name} has {vec.size} values, "
                                        f"expected {nw + math.prod(bs)}")
            weights[name] = vec[:nw].reshape(ws)
            biases[name] = vec[nw:].reshape(bs)
        return cls(shape, weights, biases, seed)


def init_network(shape: NetworkShape, seed: int = 0) -> NetworkParams:
    """He-uniform for the rectifier layers, Glorot-uniform for the sigmoid output; zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = {}, {}
    for name, (ws, bs) in shape.param_shapes().items():
        if name in CONV_LAYERS:
            fan_in, fan_out = ws[1] * ws[2], ws[0] * ws[2]
        else:
            fan_in, fan_out = ws
        if name == "dense3":
            limit = math.sqrt(6.0 / (fan_in + fan_out))
        else:
            limit = math.sqrt(6.0 / fan_in)
        weights[name] = rng.uniform(-limit, limit, size=ws)
        biases[name] = np.zeros(bs)
    return NetworkParams(shape, weights, biases, seed)


def assemble_input(x: EmbeddingSegment | np.ndarray, models: ModelBank | Sequence) -> np.ndarray:
    """Stack ``[x, m_1, ..., m_S]`` into an ``(S+1, b)`` array."""
    xv = x.vector if isinstance(x, EmbeddingSegment) else np.asarray(x, dtype=float)
    mats = models.matrix() if isinstance(models, ModelBank) else [np.asarray(m, float) for m in models]
    rows = [xv, *mats]
    if any(np.ndim(r) != 1 or len(r) != len(xv) for r in rows):
        raise DimensionMismatch(f"all vectors must have length {len(xv)}: "
                                f"{[np.shape(r) for r in rows]}")
    return np.stack(rows)


_TINY = np.finfo(float).tiny
_BELOW_ONE = np.nextafter(1.0, 0.0)


def _sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # saturation would round to exactly 0 or 1; keep scores inside the open interval
    return np.clip(out, _TINY, _BELOW_ONE)


def _conv_forward(x, w, bias):
    n, c, length = x.shape
    f = w.shape[0]
    p = length - KERNEL + 1
    cols = sliding_window_view(x, KERNEL, axis=2)          # (n, c, p, k)
    cols = cols.transpose(0, 2, 1, 3).reshape(n * p, c * KERNEL)
    z = (cols @ w.reshape(f, c * KERNEL).T).reshape(n, p, f).transpose(0, 2, 1)
    return z + bias[None, :, None], cols


def _conv_backward(dz, cols, w, in_shape):
    n, c, length = in_shape
    f = w.shape[0]
    p = length - KERNEL + 1
    dz2 = dz.transpose(0, 2, 1).reshape(n * p, f)
    dw = (dz2.T @ cols).reshape(w.shape)
    db = dz.sum(axis=(0, 2))
    dcols = (dz2 @ w.reshape(f, c * KERNEL)).reshape(n, p, c, KERNEL)
    dx = np.zeros(in_shape)
    for k in range(KERNEL):
        dx[:, :, k:k + p] += dcols[:, :, :, k].transpose(0, 2, 1)
    return dw, db, dx


def _check_input(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    want = (params.shape.S + 1, params.shape.b)
    if x.ndim != 3 or x.shape[1:] != want:
        raise DimensionMismatch(f"input shape {x.shape[1:] if x.ndim == 3 else x.shape}, "
                                f"expected {want}")
    return x


def _forward(params: NetworkParams, x: np.ndarray):
    cache = []
    h = x
    for name in CONV_LAYERS:
        z, cols = _conv_forward(h, params.weights[name], params.biases[name])
        cache.append((h.shape, cols, z))
        h = np.maximum(z, 0.0)
    n = h.shape[0]
    flat_shape = h.shape
    h = h.reshape(n, -1)
    dense_cache = []
    for name in ("dense1", "dense2"):
        z = h @ params.weights[name] + params.biases[name]
        dense_cache.append((h, z))
        h = np.maximum(z, 0.0)
    z = h @ params.weights["dense3"] + params.biases["dense3"]
    dense_cache.append((h, z))
    return _sigmoid(z), (cache, flat_shape, dense_cache)


def forward(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Scores for one ``(S+1, b)`` input (returns ``(S,)``) or a batch ``(N, S+1, b)``."""
    single = np.ndim(x) == 2
    p, _ = _forward(params, _check_input(params, x))
    return p[0] if single else p


def layer_output_shapes(params: NetworkParams, x: np.ndarray) -> list[tuple[int, ...]]:
    """Per-sample shapes of every layer's output for an audit of the architecture."""
    x = _check_input(params, x)
    _, (cache, flat_shape, dense_cache) = _forward(params, x)
    shapes = [tuple(x.shape[1:])]
    shapes += [tuple(z.shape[1:]) for _, _, z in cache]
    shapes += [tuple(z.shape[1:]) for _, z in dense_cache]
    return shapes


def bce_loss(scores, target) -> float:
    """Mean binary cross-entropy over the ``S`` outputs (averaged over a batch too)."""
    p = np.clip(np.asarray(scores, dtype=float), PROB_CLAMP, 1 - PROB_CLAMP)
    t = np.asarray(target, dtype=float)
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


def _per_sample_loss(p, t):
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    return np.mean(-(t * np.log(pc) + (1 - t) * np.log(1 - pc)), axis=1)


@dataclass(frozen=True, eq=False)
class TrainingSample:
    input: np.ndarray
    target: np.ndarray


class TrainingSet:
    """Inputs ``(N, S+1, b)`` and targets ``(N, S)`` stored as contiguous arrays."""

    def __init__(self, inputs: np.ndarray, targets: np.ndarray):
        if inputs.ndim != 3 or targets.ndim != 2 or inputs.shape[0] != targets.shape[0]:
            raise DimensionMismatch(f"inputs {inputs.shape} vs targets {targets.shape}")
        if inputs.shape[1] != targets.shape[1] + 1:
            raise DimensionMismatch("inputs need S+1 channels for S targets")
        self.inputs = inputs
        self.targets = targets

    @classmethod
    def from_samples(cls, samples: Iterable[TrainingSample]) -> "TrainingSet":
        samples = list(samples)
        if not samples:
            raise InvalidArgument("empty batch")
        return cls(np.stack([s.input for s in samples]), np.stack([s.target for s in samples]))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, i: int) -> TrainingSample:
        return TrainingSample(self.inputs[i], self.targets[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.inputs[idx], self.targets[idx])


def _as_set(batch) -> TrainingSet:
    return batch if isinstance(batch, TrainingSet) else TrainingSet.from_samples(batch)


def loss_and_gradients(params: NetworkParams, batch) -> tuple[float, dict, dict]:
    """Mean batch loss and its exact gradient as ``(loss, dweights, dbiases)``.

    Outputs that sit on the probability clamp contribute zero gradient; the
    ReLU derivative at exactly zero is taken as zero.
    """
    data = _as_set(batch)
    if len(data) == 0:
        raise InvalidArgument("empty batch")
    losses, dw, db = _backprop(params, _check_input(params, data.inputs), data.targets)
    return float(np.mean(losses)), dw, db


def _backprop(params, x, t):
    p, (cache, flat_shape, dense_cache) = _forward(params, x)
    n, S = p.shape
    losses = _per_sample_loss(p, t)
    inside = (p > PROB_CLAMP) & (p < 1 - PROB_CLAMP)
    # d(BCE)/dp * dp/dz collapses to (p - t) for a sigmoid output
    dz = np.where(inside, (p - t) / (n * S), 0.0)

    dw, db = {}, {}
    h, _ = dense_cache[2]
    dw["dense3"] = h.T @ dz
    db["dense3"] = dz.sum(axis=0)
    dh = dz @ params.weights["dense3"].T
    for name, (h, z) in zip(("dense2", "dense1"), (dense_cache[1], dense_cache[0])):
        dz = dh * (z > 0)
        dw[name] = h.T @ dz
        db[name] = dz.sum(axis=0)
        dh = dz @ params.weights[name].T
    dh = dh.reshape(flat_shape)
    for name, (in_shape, cols, z) in zip(reversed(CONV_LAYERS), reversed(cache)):
        dz = dh * (z > 0)
        dw[name], db[name], dh = _conv_backward(dz, cols, params.weights[name], in_shape)
    return losses, dw, db


def gradients(params: NetworkParams, batch) -> NetworkParams:
    """Gradient of the mean batch loss, packaged with the same layout as ``params``."""
    _, dw, db = loss_and_gradients(params, batch)
    return NetworkParams(params.shape, dw, db, params.seed)


def batch_loss(params: NetworkParams, batch) -> float:
    data = _as_set(batch)
    p = forward(params, data.inputs)
    return float(np.mean(_per_sample_loss(p, data.targets)))


def _relu_pattern(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    _, (cache, _, dense_cache) = _forward(params, x)
    zs = [z for _, _, z in cache] + [z for _, z in dense_cache[:2]]
    return np.concatenate([(z > 0).ravel() for z in zs])


@dataclass(frozen=True)
class GradcheckResult:
    max_rel_error: float
    checked: int
    skipped: int


def finite_difference_check(params: NetworkParams, batch, h: float = 1e-4,
                            floor: float = 1e-6) -> GradcheckResult:
    """Compare analytic gradients against central differences, coordinate by coordinate.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    coordinates whose true gradient is zero from dividing by nothing. When a
    perturbation flips any ReLU the quotient straddles a kink, so the step is
    shrunk tenfold for that coordinate. If even a 1e-8 step flips one, the
    kink sits at the evaluation point itself (the loss is not differentiable
    there) and the coordinate is skipped.
    """
    data = _as_set(batch)
    x = _check_input(params, data.inputs)
    analytic = gradients(params, data).flat()
    theta = params.flat()
    base = _relu_pattern(params, x)
    worst = 0.0
    skipped = 0
    for i in range(theta.size):
        step = h
        while step >= 1e-8:
            up, down = theta.copy(), theta.copy()
            up[i] += step
            down[i] -= step
            p_up, p_down = params.with_flat(up), params.with_flat(down)
            if (np.array_equal(_relu_pattern(p_up, x), base)
                    and np.array_equal(_relu_pattern(p_down, x), base)):
                break
            step /= 10
        else:
            skipped += 1
            continue
        numeric = (batch_loss(p_up, data) - batch_loss(p_down, data)) / (2 * step)
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return GradcheckResult(float(worst), theta.size - skipped, skipped)


def random_gradcheck_sample(shape: NetworkShape, seed: int, n: int = 1) -> TrainingSet:
    """Random inputs with random binary targets for gradient audits."""
    rng = np.random.default_rng(seed + 7919)
    x = rng.normal(size=(n, shape.S + 1, shape.b))
    t = (rng.uniform(size=(n, shape.S)) < 0.5).astype(float)
    return TrainingSet(x, t)


def gradcheck(b: int, S: int, seed: int) -> GradcheckResult:
    shape = NetworkShape(b, S)
    return finite_difference_check(init_network(shape, seed), random_gradcheck_sample(shape, seed))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 64
    epochs: int = 30
    p_zero: float = 0.2
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise InvalidArgument("learning rate must be non-negative")
        if not 0 <= self.p_zero <= 1:
            raise InvalidArgument("p_zero must be in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgument("bad batch_size / epochs")


def permutation_samples(x: np.ndarray, models: np.ndarray, speakers: Sequence[str],
                        truth: frozenset) -> list[tuple[np.ndarray, np.ndarray]]:
    """All ``S!`` orderings of the bank appended to ``x``, with matching targets."""
    S = len(speakers)
    hot = np.array([1.0 if spk in truth else 0.0 for spk in speakers])
    out = []
    for perm in itertools.permutations(range(S)):
        perm = list(perm)
        inp = np.empty((S + 1, x.shape[0]))
        inp[0] = x
        inp[1:] = models[perm]
        out.append((inp, hot[perm]))
    return out


def build_training_set(pairs: Iterable[tuple[Sequence[EmbeddingSegment], ModelBank]],
                       cfg: TrainConfig, rng: np.random.Generator) -> TrainingSet:
    """Permutation- and zero-pad-augmented samples from ``(stream, bank)`` pairs.

    Every segment yields one sample per bank permutation. Each of those base
    samples, with probability ``cfg.p_zero``, also yields a copy in which one
    uniformly chosen model slot is zeroed and its target forced to 0.
    """
    inputs, targets = [], []
    S = None
    for stream, bank in pairs:
        if S is None:
            S = len(bank)
        elif len(bank) != S:
            raise InvalidArgument(f"bank sizes differ across recordings: {S} vs {len(bank)}")
        models = bank.matrix()
        speakers = bank.speakers
        for seg in stream:
            if seg.dim != bank.dim:
                raise DimensionMismatch(f"segment dim {seg.dim} vs bank dim {bank.dim}")
            for inp, tgt in permutation_samples(seg.vector, models, speakers, seg.truth):
                inputs.append(inp)
                targets.append(tgt)
                if rng.uniform() < cfg.p_zero:
                    slot = int(rng.integers(S))
                    zi, zt = inp.copy(), tgt.copy()
                    zi[slot + 1] = 0.0
                    zt[slot] = 0.0
                    inputs.append(zi)
                    targets.append(zt)
    if not inputs:
        raise InvalidArgument("no training samples")
    return TrainingSet(np.stack(inputs), np.stack(targets))


def train(params: NetworkParams, dataset: TrainingSet, cfg: TrainConfig,
          log=None) -> tuple[NetworkParams, list[float]]:
    """Mini-batch SGD at a fixed learning rate.

    Returns the trained copy and the per-epoch mean loss, where each sample's
    loss is taken from the forward pass of the step that consumed it.
    """
    if len(dataset) == 0:
        raise InvalidArgument("empty dataset")
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        sample_loss = np.empty(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            losses, dw, db = _backprop(params, dataset.inputs[idx], dataset.targets[idx])
            sample_loss[idx] = losses
            if cfg.lr == 0:
                continue
            for name in LAYERS:
                params.weights[name] -= cfg.lr * dw[name]
                params.biases[name] -= cfg.lr * db[name]
        history.append(float(np.mean(sample_loss)))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss={history[-1]:.5f}")
    return params, history


def score_stream(params: NetworkParams, bank: ModelBank,
                 stream: Sequence[EmbeddingSegment]) -> np.ndarray:
    """``(T, S)`` scores of every segment against the bank in canonical order."""
    if params.shape != NetworkShape(bank.dim, len(bank)):
        raise DimensionMismatch(f"network is b={params.shape.b} S={params.shape.S}, "
                                f"bank is b={bank.dim} S={len(bank)}")
    if not stream:
        return np.zeros((0, len(bank)))
    models = bank.matrix()
    x = np.empty((len(stream), len(bank) + 1, bank.dim))
    for i, seg in enumerate(stream):
        if seg.dim != bank.dim:
            raise DimensionMismatch(f"segment {seg.index} has dim {seg.dim}, bank has {bank.dim}")
        x[i, 0] = seg.vector
    x[:, 1:] = models[None]
    return forward(params, x)
