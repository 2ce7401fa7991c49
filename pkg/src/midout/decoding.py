"""Left-to-right and middle-out caption decoders with dual self-attention.

Both families share one step routine.  A left-to-right decoder is treated as a
middle-out decoder whose only active side is ``right`` and whose seed is the
START token, so greedy decoding and beam search are written once.

Middle-out decoding alternates sides (left first by default).  Every step
appends the embedding of the emitted token and the post-step hidden state to
memories shared by both sides in global generation order; the embedding memory
starts out holding the seed (middle word or START).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import BilinearAttention
from .layers import BiEncoder, BiEncoderOutput, EmbeddingTable, Linear, LstmCell, LstmState
from .rng import RngStream
from .tensor import (ContractError, ParameterStore, Tensor, add_scalars, concat, cross_entropy, scale,
                     softmax)

LEFT, RIGHT = "left", "right"
START, STOP = "<start>", "<stop>"


def other_side(side: str) -> str:
    return RIGHT if side == LEFT else LEFT


class SelfAttnVariant(enum.Enum):
    NONE = "none"
    OUTPUT = "output"
    HIDDEN = "hidden"
    DUAL = "dual"

    @classmethod
    def parse(cls, value) -> "SelfAttnVariant":
        if isinstance(value, cls):
            return value
        aliases = {"output_only": "output", "hidden_only": "hidden"}
        try:
            return cls(aliases.get(value, value))
        except ValueError:
            raise ContractError(f"unknown self-attention variant {value!r}") from None

    @property
    def uses_output(self) -> bool:
        return self in (SelfAttnVariant.OUTPUT, SelfAttnVariant.DUAL)

    @property
    def uses_hidden(self) -> bool:
        return self in (SelfAttnVariant.HIDDEN, SelfAttnVariant.DUAL)


class Vocab:
    def __init__(self, words: list[str]):
        self.itos = [START, STOP] + [w for w in words if w not in (START, STOP)]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ContractError("vocabulary contains duplicate words")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def start(self) -> int:
        return 0

    @property
    def stop(self) -> int:
        return 1

    def encode(self, tokens: list[str]) -> list[int]:
        try:
            return [self.stoi[t] for t in tokens]
        except KeyError as exc:
            raise ContractError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]


@dataclass
class Memories:
    """Shared, append-only attention memories in global generation order."""

    embeddings: list[Tensor] = field(default_factory=list)
    hidden: list[Tensor] = field(default_factory=list)

    def copy(self) -> "Memories":
        return Memories(list(self.embeddings), list(self.hidden))


@dataclass
class DecoderStepContext:
    e_prev: Tensor
    c_t: Tensor
    d_t: Tensor | None = None
    h_tilde: Tensor | None = None
    extra: Tensor | None = None

    def step_input(self) -> Tensor:
        parts = [self.e_prev, self.c_t]
        parts += [t for t in (self.d_t, self.h_tilde, self.extra) if t is not None]
        return concat(parts)


class AttentionBlock:
    """Encoder attention plus whichever self-attention mechanisms the variant enables."""

    def __init__(self, store: ParameterStore, variant: SelfAttnVariant, dec_hidden: int, enc_width: int,
                 emb_size: int, rng: RngStream, name: str = "attention"):
        self.variant = variant
        self.enc = BilinearAttention(store, f"{name}.encoder", dec_hidden, enc_width, rng)
        self.out = BilinearAttention(store, f"{name}.outputs", dec_hidden, emb_size, rng) if variant.uses_output else None
        self.hid = BilinearAttention(store, f"{name}.hidden", dec_hidden, dec_hidden, rng) if variant.uses_hidden else None

    @staticmethod
    def input_size(variant: SelfAttnVariant, prev_size: int, enc_width: int, emb_size: int, dec_hidden: int,
                   extra_size: int = 0) -> int:
        size = prev_size + enc_width + extra_size
        if variant.uses_output:
            size += emb_size
        if variant.uses_hidden:
            size += dec_hidden
        return size

    def context(self, query: Tensor, encoder_out: BiEncoderOutput, prev_input: Tensor, memories: Memories,
                extra: Tensor | None = None) -> DecoderStepContext:
        c_t = self.enc.attend(query, encoder_out.keys).context
        d_t = self.out.attend(query, memories.embeddings).context if self.out is not None else None
        h_tilde = self.hid.attend(query, memories.hidden).context if self.hid is not None else None
        return DecoderStepContext(prev_input, c_t, d_t, h_tilde, extra)


@dataclass
class DecoderSide:
    cell: LstmCell
    head: Linear


def alternation_order(n_left: int, n_right: int, left_first: bool = True) -> list[str]:
    """Global step order for sides that take ``n_left`` / ``n_right`` steps (STOP included)."""
    remaining = {LEFT: n_left, RIGHT: n_right}
    turn = LEFT if left_first else RIGHT
    order = []
    while remaining[LEFT] or remaining[RIGHT]:
        side = turn if remaining[turn] else other_side(turn)
        order.append(side)
        remaining[side] -= 1
        turn = other_side(side)
    return order


def split_at_middle(tokens: list, middle) -> tuple[list, list]:
    """Left targets (reversed, STOP-terminated) and right targets around the first ``middle``."""
    if middle not in tokens:
        raise ContractError(f"middle token {middle!r} does not occur in {tokens!r}")
    k = tokens.index(middle)
    return list(reversed(tokens[:k])), list(tokens[k + 1:])


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class Hypothesis:
    """Beam candidate.  ``left`` is stored in generation order (nearest the middle first)."""

    right: list[int]
    left: list[int]
    middle: int | None
    logprob: float
    score: float
    forced: bool = False
    # decoding state, not part of the result
    states: dict = field(default_factory=dict, repr=False)
    prev: dict = field(default_factory=dict, repr=False)
    memories: Memories | None = field(default=None, repr=False)
    finished_sides: dict = field(default_factory=dict, repr=False)
    turn: str = LEFT

    @property
    def finished(self) -> bool:
        return all(self.finished_sides.values())

    @property
    def length(self) -> int:
        return len(self.left) + len(self.right) + (self.middle is not None)

    def tokens(self) -> list[int]:
        mid = [] if self.middle is None else [self.middle]
        return list(reversed(self.left)) + mid + list(self.right)


@dataclass
class Generation:
    tokens: list[int]
    left: list[int]
    right: list[int]
    middle: int | None
    forced: dict = field(default_factory=dict)


class CaptionDecoderBase:
    """Shared machinery for captioning decoders over a bidirectional encoder."""

    family = "base"
    sides: tuple[str, ...] = ()

    def __init__(self, vocab: Vocab, feature_size: int, emb_size: int, hidden_size: int,
                 variant="dual", seed: int = 0, left_first: bool = True, oracle_input: bool = False):
        self.vocab = vocab
        self.variant = SelfAttnVariant.parse(variant)
        self.feature_size, self.emb_size, self.hidden_size = feature_size, emb_size, hidden_size
        self.left_first = left_first
        self.oracle_input = oracle_input
        self.store = ParameterStore()
        rng = RngStream(seed)
        H, E = hidden_size, emb_size
        self.encoder = BiEncoder(self.store, "encoder", feature_size, H, H, rng)
        self.embedding = EmbeddingTable(self.store, "embedding", len(vocab), E, rng)
        self.attention = AttentionBlock(self.store, self.variant, H, 2 * H, E, rng)
        in_size = AttentionBlock.input_size(self.variant, E, 2 * H, E, H, E if oracle_input else 0)
        self.side_modules = {
            s: DecoderSide(LstmCell(self.store, f"decoder.{s}.cell", in_size, H, rng),
                           Linear(self.store, f"decoder.{s}.head", H, len(vocab), rng))
            for s in self.sides
        }

    # -- single step ----------------------------------------------------------

    def encode(self, features) -> BiEncoderOutput:
        return self.encoder(np.asarray(features, dtype=np.float64))

    def step(self, side: str, encoder_out: BiEncoderOutput, prev_emb: Tensor, state: LstmState,
             memories: Memories, extra: Tensor | None = None) -> tuple[LstmState, Tensor, DecoderStepContext]:
        """One recurrence step; the pre-step hidden state is the query of all attentions.

        Memories are not modified.  Returns (new state, logits, step context).
        """
        if self.oracle_input and extra is None:
            raise ContractError("oracle-input decoder needs the middle-word embedding at every step")
        mods = self.side_modules[side]
        ctx = self.attention.context(state.h, encoder_out, prev_emb, memories, extra if self.oracle_input else None)
        new = mods.cell.step(ctx.step_input(), state)
        return new, mods.head(new.h), ctx

    def decode_step(self, side: str, encoder_out: BiEncoderOutput, prev_token, state: LstmState,
                    memories: Memories, extra: Tensor | None = None) -> tuple[LstmState, np.ndarray]:
        """Step from a token id; returns the new state and the softmax distribution."""
        new, logits, _ = self.step(side, encoder_out, self.embedding(prev_token), state, memories, extra)
        return new, softmax(logits).data

    # -- teacher-forced loss --------------------------------------------------

    def _forced_pass(self, features, seed_ids, targets: dict[str, np.ndarray], middle_ids=None,
                     sample_rate: float = 0.0, rng: RngStream | None = None) -> Tensor:
        """Teacher-forced pass in generation order; mean cross-entropy per target token.

        With ``sample_rate > 0`` each next-step input (never a target) is replaced,
        per batch item, by a token sampled from the model with that probability.
        """
        enc = self.encode(features)
        seed_ids = np.asarray(seed_ids, dtype=np.int64)
        batch = seed_ids.shape[0]
        seed_emb = self.embedding(seed_ids)
        extra = self.embedding(np.asarray(middle_ids, dtype=np.int64)) if self.oracle_input else None
        memories = Memories([seed_emb], [])
        states = {s: enc.init_state for s in self.sides}
        prev = {s: seed_emb for s in self.sides}
        pos = {s: 0 for s in self.sides}
        lengths = {s: targets[s].shape[1] for s in self.sides}
        if self.sides == (RIGHT,):
            order = [RIGHT] * lengths[RIGHT]
        else:
            order = alternation_order(lengths[LEFT], lengths[RIGHT], self.left_first)
        losses = []
        for side in order:
            new, logits, _ = self.step(side, enc, prev[side], states[side], memories, extra)
            gold = targets[side][:, pos[side]]
            losses.append(cross_entropy(logits, gold, reduction="sum"))
            fed = gold
            if sample_rate > 0.0:
                probs = softmax(Tensor(logits.data)).data
                sampled = rng.categorical_rows(probs)
                use = rng.uniform_array(batch) < sample_rate
                fed = np.where(use, sampled, gold)
            emb = self.embedding(fed)
            memories.embeddings.append(emb)
            memories.hidden.append(new.h)
            prev[side] = emb
            states[side] = new
            pos[side] += 1
        return scale(add_scalars(losses), 1.0 / (batch * len(order)))

    # -- greedy decoding ------------------------------------------------------

    def _start(self, features, seed: int, middle: int | None, active_sides=None):
        enc = self.encode(np.asarray(features, dtype=np.float64)[None] if np.ndim(features) == 2 else features)
        if enc.keys.shape[0] != 1:
            raise ContractError("decoding runs one input at a time")
        seed_emb = self.embedding(np.array([seed]))
        extra = None
        if self.oracle_input:
            if middle is None:
                raise ContractError("oracle-input decoder needs a middle word at inference")
            extra = self.embedding(np.array([middle]))
        active = tuple(active_sides) if active_sides is not None else self.sides
        for s in active:
            if s not in self.side_modules:
                raise ContractError(f"decoder has no {s} side")
        return enc, seed_emb, extra, active

    def _greedy(self, features, seed: int, middle: int | None, max_len: int, active_sides=None) -> Generation:
        enc, seed_emb, extra, active = self._start(features, seed, middle, active_sides)
        memories = Memories([seed_emb], [])
        states = {s: enc.init_state for s in active}
        prev = {s: seed_emb for s in active}
        out = {LEFT: [], RIGHT: []}
        done = {LEFT: LEFT not in active, RIGHT: RIGHT not in active}
        forced = {LEFT: False, RIGHT: False}
        turn = LEFT if self.left_first else RIGHT
        while not (done[LEFT] and done[RIGHT]):
            side = turn if not done[turn] else other_side(turn)
            new, logits, _ = self.step(side, enc, prev[side], states[side], memories, extra)
            tok = int(np.argmax(logits.data[0]))
            emb = self.embedding(np.array([tok]))
            memories.embeddings.append(emb)
            memories.hidden.append(new.h)
            prev[side], states[side] = emb, new
            if tok == self.vocab.stop:
                done[side] = True
            else:
                out[side].append(tok)
                if len(out[side]) >= max_len:
                    done[side] = forced[side] = True
            turn = other_side(side)
        mid = None if seed == self.vocab.start else seed
        tokens = list(reversed(out[LEFT])) + ([] if mid is None else [mid]) + out[RIGHT]
        return Generation(tokens, out[LEFT], out[RIGHT], mid, forced)

    # -- beam search ----------------------------------------------------------

    def _beam(self, features, seeds: list[tuple[int, float]], beam_size: int, max_len: int,
              middle: int | None = None, active_sides=None) -> list[Hypothesis]:
        """Beam search with beam slots split evenly over ``seeds`` (token, log-prob) pairs.

        Each seed runs its own beam of width ``max(1, beam_size // len(seeds))``;
        finished hypotheses are pooled and the ``beam_size`` best by
        score = sum log p + output length are returned.
        """
        if beam_size < 1:
            raise ContractError(f"beam_size must be >= 1, got {beam_size}")
        if not seeds:
            raise ContractError("beam search needs at least one seed")
        seeds = seeds[:beam_size]
        width = max(1, beam_size // len(seeds))
        pool: list[Hypothesis] = []
        for seed, seed_lp in seeds:
            enc, seed_emb, extra, active = self._start(features, seed, middle, active_sides)
            mid = None if seed == self.vocab.start else seed
            root = Hypothesis([], [], mid, seed_lp, 0.0, states={s: enc.init_state for s in active},
                              prev={s: seed_emb for s in active}, memories=Memories([seed_emb], []),
                              finished_sides={LEFT: LEFT not in active, RIGHT: RIGHT not in active},
                              turn=LEFT if self.left_first else RIGHT)
            root.score = root.logprob + root.length
            pool.extend(self._beam_one(enc, extra, root, width, max_len))
        order = sorted(range(len(pool)), key=lambda i: -pool[i].score)
        return [pool[i] for i in order[:beam_size]]

    def _beam_one(self, enc, extra, root: Hypothesis, width: int, max_len: int) -> list[Hypothesis]:
        live, finished = [root], []
        while live and len(finished) < width:
            candidates = []
            for hyp in live:
                side = hyp.turn if not hyp.finished_sides[hyp.turn] else other_side(hyp.turn)
                new, logits, _ = self.step(side, enc, hyp.prev[side], hyp.states[side], hyp.memories, extra)
                logp = _log_softmax_np(logits.data[0])
                top = np.argsort(-logp, kind="stable")[:width]
                for tok in top:
                    candidates.append(self._extend(hyp, side, int(tok), float(logp[tok]), new, max_len))
            candidates.sort(key=lambda h: -h.score)
            live = []
            for cand in candidates[:width]:
                (finished if cand.finished else live).append(cand)
        if not finished:
            finished = live
        finished.sort(key=lambda h: -h.score)
        return finished[:width]

    def _extend(self, hyp: Hypothesis, side: str, tok: int, lp: float, new: LstmState, max_len: int) -> Hypothesis:
        emb = self.embedding(np.array([tok]))
        memories = hyp.memories.copy()
        memories.embeddings.append(emb)
        memories.hidden.append(new.h)
        child = Hypothesis(list(hyp.right), list(hyp.left), hyp.middle, hyp.logprob + lp, 0.0, hyp.forced,
                           states=dict(hyp.states), prev=dict(hyp.prev), memories=memories,
                           finished_sides=dict(hyp.finished_sides), turn=other_side(side))
        child.states[side] = new
        child.prev[side] = emb
        if tok == self.vocab.stop:
            child.finished_sides[side] = True
        else:
            (child.left if side == LEFT else child.right).append(tok)
            if len(child.left if side == LEFT else child.right) >= max_len:
                child.finished_sides[side] = True
                child.forced = True
        child.score = child.logprob + child.length
        return child

    # -- persistence ----------------------------------------------------------

    def config(self) -> dict:
        return {
            "family": self.family, "variant": self.variant.value, "vocab": self.vocab.itos[2:],
            "feature_size": self.feature_size, "emb_size": self.emb_size, "hidden_size": self.hidden_size,
            "left_first": self.left_first, "oracle_input": self.oracle_input,
        }


class Seq2SeqModel(CaptionDecoderBase):
    """Left-to-right attention decoder; ``oracle_input`` concatenates the middle-word embedding every step."""

    family = "baseline"
    sides = (RIGHT,)

    def loss(self, features, tokens, middle_ids=None, sample_rate: float = 0.0, rng: RngStream | None = None) -> Tensor:
        """``tokens`` is a (batch, L) array of gold captions without START/STOP."""
        tokens = np.asarray(tokens, dtype=np.int64)
        batch = tokens.shape[0]
        targets = np.concatenate([tokens, np.full((batch, 1), self.vocab.stop)], axis=1)
        return self._forced_pass(features, np.full(batch, self.vocab.start), {RIGHT: targets},
                                 middle_ids, sample_rate, rng)

    def greedy(self, features, middle: int | None = None, max_len: int = 20) -> Generation:
        return self._greedy(features, self.vocab.start, middle, max_len)

    def beam_search(self, features, beam_size: int = 8, middle: int | None = None, max_len: int = 20) -> list[Hypothesis]:
        return self._beam(features, [(self.vocab.start, 0.0)], beam_size, max_len, middle)


class MiddleOutModel(CaptionDecoderBase):
    """Two LSTM decoders (left, right) sharing the encoder, embeddings and attention memories."""

    family = "middleout"
    sides = (LEFT, RIGHT)

    def loss(self, features, left_targets, right_targets, middle_ids, sample_rate: float = 0.0,
             rng: RngStream | None = None) -> Tensor:
        """Targets are STOP-terminated (batch, n) arrays; left targets run outward from the middle."""
        left = np.asarray(left_targets, dtype=np.int64)
        right = np.asarray(right_targets, dtype=np.int64)
        for name, arr in (("left", left), ("right", right)):
            if arr.ndim != 2 or arr.shape[1] == 0 or not (arr[:, -1] == self.vocab.stop).all():
                raise ContractError(f"{name} targets must be nonempty and end with STOP")
        return self._forced_pass(features, middle_ids, {LEFT: left, RIGHT: right}, None, sample_rate, rng)

    def generate(self, features, middle: int, max_len_per_side: int = 10, active_sides=None) -> Generation:
        if not 0 <= middle < len(self.vocab):
            raise ContractError(f"middle token {middle} not in vocabulary")
        return self._greedy(features, middle, None, max_len_per_side, active_sides)

    def beam_search(self, features, seeds: list[tuple[int, float]], beam_size: int = 8,
                    max_len_per_side: int = 10) -> list[Hypothesis]:
        return self._beam(features, seeds, beam_size, max_len_per_side)


def middle_out_targets(vocab: Vocab, tokens: list[int], middle: int) -> tuple[list[int], list[int]]:
    left, right = split_at_middle(tokens, middle)
    return left + [vocab.stop], right + [vocab.stop]


class MiddleWordClassifier:
    """LSTM over the input frames; softmax over the middle-word classes from the final hidden state."""

    def __init__(self, n_classes: int, feature_size: int, hidden_size: int, seed: int = 0):
        self.n_classes, self.feature_size, self.hidden_size = n_classes, feature_size, hidden_size
        self.store = ParameterStore()
        rng = RngStream(seed)
        self.cell = LstmCell(self.store, "classifier.lstm", feature_size, hidden_size, rng)
        self.head = Linear(self.store, "classifier.head", hidden_size, n_classes, rng)

    def logits(self, features) -> Tensor:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] == 0:
            raise ContractError(f"classifier needs a nonempty (batch, n, features) input, got {x.shape}")
        _, last = self.cell.run(x)
        return self.head(last)

    def loss(self, features, labels) -> Tensor:
        return cross_entropy(self.logits(features), labels)

    def predict_proba(self, features) -> np.ndarray:
        return softmax(self.logits(features)).data

    def top_k(self, features, k: int) -> list[list[tuple[int, float]]]:
        """Per input, the ``k`` most probable classes with their log-probabilities."""
        probs = self.predict_proba(features)
        out = []
        for row in probs:
            idx = np.argsort(-row, kind="stable")[:k]
            out.append([(int(i), math.log(max(row[i], 1e-300))) for i in idx])
        return out

    def config(self) -> dict:
        return {"family": "classifier", "n_classes": self.n_classes, "feature_size": self.feature_size,
                "hidden_size": self.hidden_size}


def classify_middle_word(classifier: MiddleWordClassifier, features) -> np.ndarray:
    return classifier.predict_proba(features)


def simulate_classifier_accuracy(oracle_words, target_accuracy: float, rng: RngStream,
                                 classifier_words=None, corruption_vocab=None,
                                 classifier_accuracy: float | None = None) -> list:
    """Middle words whose accuracy against ``oracle_words`` is ``target_accuracy`` in expectation.

    Mixing mode (``classifier_words`` given): each item takes the classifier word
    with probability ``(1 - target) / (1 - classifier_accuracy)`` (the sampling
    ratio) and the oracle word otherwise.  Corruption mode (``corruption_vocab``
    given): each item is replaced with probability ``1 - target`` by a uniformly
    drawn word from the vocabulary other than the oracle word.
    """
    if not 0.0 <= target_accuracy <= 1.0:
        raise ContractError(f"target accuracy must lie in [0, 1], got {target_accuracy}")
    oracle_words = list(oracle_words)
    if classifier_words is not None:
        classifier_words = list(classifier_words)
        if classifier_accuracy is None:
            classifier_accuracy = float(np.mean([a == b for a, b in zip(classifier_words, oracle_words)]))
        ratio = sampling_ratio(target_accuracy, classifier_accuracy)
        u = rng.uniform_array(len(oracle_words))
        return [c if ui < ratio else o for o, c, ui in zip(oracle_words, classifier_words, u)]
    if corruption_vocab is None:
        raise ContractError("need either classifier_words or corruption_vocab")
    vocab = list(corruption_vocab)
    u = rng.uniform_array(len(oracle_words))
    out = []
    for o, ui in zip(oracle_words, u):
        if ui < 1.0 - target_accuracy:
            wrong = [w for w in vocab if w != o]
            out.append(wrong[rng.randint(len(wrong))])
        else:
            out.append(o)
    return out


def sampling_ratio(target_accuracy: float, classifier_accuracy: float) -> float:
    """Fraction of items drawn from the classifier so the mix reaches ``target_accuracy``."""
    if classifier_accuracy >= 1.0:
        return 0.0
    return min(1.0, max(0.0, (1.0 - target_accuracy) / (1.0 - classifier_accuracy)))
