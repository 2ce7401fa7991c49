"""Symmetric sequence de-noising: data, regression decoders, training, evaluation.

A clean sequence of length 2N+1 peaks at its middle value mu and falls off
linearly by mu**2 / N per position on both sides; the input is the clean
sequence plus bounded uniform noise.  The regression decoders feed the raw
previous value instead of a token embedding and emit one real per step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoding import LEFT, RIGHT, AttentionBlock, DecoderSide, Memories, SelfAttnVariant, alternation_order
from .layers import BiEncoder, Linear, LstmCell
from .metrics import mse, symmetric_mse
from .rng import RngStream
from .tensor import Adam, ContractError, ParameterStore, Tape, Tensor, add_scalars, backward, concat, mean_squared

log = logging.getLogger(__name__)


@dataclass
class DenoiseConfig:
    n_train: int = 1000
    n_test: int = 100
    n_min: int = 5
    n_max: int = 10
    noise: float = 0.0035
    hidden: int = 100
    lr: float = 1e-4
    steps: int = 20000
    batch: int = 32
    seed: int = 0
    # hidden-state self-attention per family
    middleout_self_attention: bool = True
    baseline_self_attention: bool = False
    log_every: int = 100


@dataclass
class DenoiseSample:
    mu: float
    n: int
    y: np.ndarray
    x: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"mu": self.mu, "n": self.n, "x": self.x.tolist(), "y": self.y.tolist()})

    @classmethod
    def from_json(cls, line: str) -> "DenoiseSample":
        d = json.loads(line)
        return cls(float(d["mu"]), int(d["n"]), np.array(d["y"], dtype=np.float64), np.array(d["x"], dtype=np.float64))


def clean_sequence(mu: float, n: int) -> np.ndarray:
    """Symmetric sequence y[n +- j] = mu - j * mu**2 / n, j = 0..n."""
    sigma = mu * mu
    offsets = np.abs(np.arange(-n, n + 1))
    return mu - offsets * (sigma / n)


def generate_denoise_dataset(config: DenoiseConfig, rng: RngStream) -> tuple[list[DenoiseSample], list[DenoiseSample]]:
    samples = []
    span = config.n_max - config.n_min + 1
    for _ in range(config.n_train + config.n_test):
        mu = rng.uniform(-1.0, 1.0)
        n = config.n_min + rng.randint(span)
        y = clean_sequence(mu, n)
        x = y + rng.uniform_array(2 * n + 1, -config.noise, config.noise)
        samples.append(DenoiseSample(mu, n, y, x))
    return samples[:config.n_train], samples[config.n_train:]


def write_dataset(path, samples: list[DenoiseSample]) -> None:
    Path(path).write_text("".join(s.to_json() + "\n" for s in samples))


def read_dataset(path) -> list[DenoiseSample]:
    return [DenoiseSample.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


class DenoiseModel:
    """Regression encoder-decoder; ``family`` is ``baseline`` or ``middleout``.

    Both families share a bidirectional encoder whose final state feeds a
    single linear layer predicting the starting value (first element for the
    baseline, middle element for middle-out).
    """

    def __init__(self, family: str, hidden: int = 100, self_attention: bool | None = None, seed: int = 0,
                 left_first: bool = True):
        if family not in ("baseline", "middleout"):
            raise ContractError(f"unknown model family {family!r}")
        if self_attention is None:
            self_attention = family == "middleout"
        self.family, self.hidden, self.self_attention = family, hidden, self_attention
        self.left_first = left_first
        self.variant = SelfAttnVariant.HIDDEN if self_attention else SelfAttnVariant.NONE
        self.store = ParameterStore()
        rng = RngStream(seed)
        H = hidden
        self.encoder = BiEncoder(self.store, "encoder", 1, H, H, rng)
        self.predictor = Linear(self.store, "predictor", 2 * H, 1, rng)
        self.attention = AttentionBlock(self.store, self.variant, H, 2 * H, 0, rng)
        in_size = AttentionBlock.input_size(self.variant, 1, 2 * H, 0, H)
        self.sides = (RIGHT,) if family == "baseline" else (LEFT, RIGHT)
        self.side_modules = {
            s: DecoderSide(LstmCell(self.store, f"decoder.{s}.cell", in_size, H, rng),
                           Linear(self.store, f"decoder.{s}.head", H, 1, rng))
            for s in self.sides
        }

    def config(self) -> dict:
        return {"family": self.family, "hidden": self.hidden, "self_attention": self.self_attention,
                "left_first": self.left_first}

    def _encode(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] == 0:
            raise ContractError("empty input sequence")
        return x, self.encoder(x[:, :, None])

    def predict_middle_value(self, x) -> Tensor:
        """Estimate of the starting value, shape (batch, 1)."""
        _, enc = self._encode(x)
        return self.predictor(enc.final)

    def _step(self, side, enc, prev: Tensor, state, memories: Memories):
        mods = self.side_modules[side]
        ctx = self.attention.context(state.h, enc, prev, memories)
        new = mods.cell.step(ctx.step_input(), state)
        return new, mods.head(new.h)

    def _run(self, x, y=None):
        """Decode with teacher forcing when ``y`` is given, else free-running.

        Returns (start prediction, {side: list of (batch, 1) outputs}).
        """
        x, enc = self._encode(x)
        batch, length = x.shape
        start = self.predictor(enc.final)
        if self.family == "baseline":
            order = [RIGHT] * (length - 1)
            anchor = 0
        else:
            if length % 2 != 1:
                raise ContractError(f"middle-out decoding needs an odd length, got {length}")
            n = length // 2
            order = alternation_order(n, n, self.left_first)
            anchor = n
        first = Tensor(y[:, anchor:anchor + 1]) if y is not None else start
        memories = Memories()
        states = {s: enc.init_state for s in self.sides}
        prev = {s: first for s in self.sides}
        outs = {s: [] for s in self.sides}
        for side in order:
            new, val = self._step(side, enc, prev[side], states[side], memories)
            outs[side].append(val)
            memories.hidden.append(new.h)
            states[side] = new
            if y is not None:
                k = len(outs[side])
                idx = anchor + k if side == RIGHT else anchor - k
                prev[side] = Tensor(y[:, idx:idx + 1])
            else:
                prev[side] = val
        return start, outs

    def _assemble(self, start: Tensor, outs) -> Tensor:
        """Full predicted sequence as a (batch, length) tensor."""
        parts = []
        if self.family == "middleout":
            parts += list(reversed(outs[LEFT]))
        parts.append(start)
        parts += outs[RIGHT]
        return concat(parts, axis=-1)

    def loss(self, x, y) -> Tensor:
        """Sequence MSE over decoder outputs plus MSE of the start-value prediction."""
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[None]
        start, outs = self._run(x, y)
        anchor = 0 if self.family == "baseline" else y.shape[1] // 2
        decoded = [v for s in self.sides for v in outs[s]]
        targets = []
        for s in self.sides:
            for k in range(1, len(outs[s]) + 1):
                idx = anchor + k if s == RIGHT else anchor - k
                targets.append(y[:, idx:idx + 1])
        seq = mean_squared(concat(decoded, axis=-1), np.concatenate(targets, axis=1))
        mid = mean_squared(start, y[:, anchor:anchor + 1])
        return add_scalars([seq, mid])

    def predict(self, x) -> np.ndarray:
        """Free-running prediction of the clean sequence, same length as ``x``."""
        start, outs = self._run(x)
        return self._assemble(start, outs).data


class BucketSampler:
    """Mini-batches whose members share a sequence length (no padding needed)."""

    def __init__(self, lengths, batch: int, rng: RngStream):
        self.batch, self.rng = batch, rng
        self.buckets: dict[int, np.ndarray] = {}
        for i, n in enumerate(lengths):
            self.buckets.setdefault(int(n), []).append(i)
        self.keys = sorted(self.buckets)
        self.buckets = {k: np.array(self.buckets[k]) for k in self.keys}
        self.sizes = np.array([len(self.buckets[k]) for k in self.keys], dtype=np.float64)
        self.queues = {k: [] for k in self.keys}

    def next(self) -> np.ndarray:
        key = self.keys[self.rng.categorical(self.sizes / self.sizes.sum())]
        members = self.buckets[key]
        take = min(self.batch, len(members))
        q = self.queues[key]
        if len(q) < take:
            q.extend(members[self.rng.permutation(len(members))].tolist())
        out, self.queues[key] = q[:take], q[take:]
        return np.array(out)


@dataclass
class TrainResult:
    model: DenoiseModel
    losses: list[tuple[int, float]] = field(default_factory=list)


class DivergenceError(RuntimeError):
    pass


def train_denoise(family: str, config: DenoiseConfig, train: list[DenoiseSample],
                  self_attention: bool | None = None, progress=None) -> TrainResult:
    """Adam on (sequence MSE + start-value MSE) with teacher forcing."""
    if self_attention is None:
        self_attention = config.middleout_self_attention if family == "middleout" else config.baseline_self_attention
    model = DenoiseModel(family, config.hidden, self_attention, seed=config.seed * 1000 + 17)
    opt = Adam(model.store, lr=config.lr)
    sampler = BucketSampler([s.n for s in train], config.batch, RngStream(config.seed).spawn(0xBA7C))
    result = TrainResult(model)
    window = []
    for step in range(1, config.steps + 1):
        idx = sampler.next()
        key = train[idx[0]].n
        x = np.stack([train[i].x for i in idx])
        y = np.stack([train[i].y for i in idx])
        with Tape() as tape:
            loss = model.loss(x, y)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"{family}: non-finite loss {value} at step {step} (n={key})")
        backward(loss, tape, model.store)
        opt.step()
        window.append(value)
        if step % config.log_every == 0 or step == config.steps:
            mean = float(np.mean(window))
            result.losses.append((step, mean))
            window = []
            if progress is not None:
                progress(step, mean)
    return result


def eval_denoise(model: DenoiseModel, test: list[DenoiseSample]) -> tuple[float, float]:
    """(MSE over every position, mean symmetric MSE per sequence) with free-running decoding."""
    preds, golds = [None] * len(test), [s.y for s in test]
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(test):
        by_len.setdefault(len(s.x), []).append(i)
    for _, idx in sorted(by_len.items()):
        out = model.predict(np.stack([test[i].x for i in idx]))
        for row, i in zip(out, idx):
            preds[i] = row
    total = mse(preds, golds)
    sym = float(np.mean([symmetric_mse(p) for p in preds]))
    return total, sym
