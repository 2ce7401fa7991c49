"""Toy video-captioning harness: scenes, templated captions, training and evaluations.

A scene is an (actor, verb, object) triple.  Every frame carries the one-hot
codes of all three plus Gaussian noise, and the references are drawn from a
handful of fixed templates, so the verb is always present exactly once and can
serve as the middle word.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoding import (MiddleOutModel, MiddleWordClassifier, Seq2SeqModel, Vocab, middle_out_targets,
                       simulate_classifier_accuracy)
from .metrics import corpus_bleu, corpus_rouge_l, self_bleu
from .rng import RngStream
from .tensor import Adam, ContractError, Tape, backward

log = logging.getLogger(__name__)

ACTORS = ("man", "woman", "boy", "girl", "dog", "cat", "chef", "player")
VERBS = ("playing", "cutting", "riding", "eating", "performing", "throwing", "holding", "washing",
         "painting", "pushing", "carrying", "cooking")
OBJECTS = ("guitar", "piano", "ball", "bike", "onion", "car", "box", "bread", "horse", "fence")
TEMPLATES = (
    "a {actor} is {verb} a {object}",
    "the {actor} is {verb} the {object}",
    "a {actor} is {verb} the {object}",
    "a {actor} {verb} a {object}",
    "there is a {actor} {verb} a {object}",
)
FUNCTION_WORDS = ("a", "the", "is", "there")


@dataclass
class ToyCaptionConfig:
    frames: int = 8
    noise: float = 0.6
    n_train: int = 2000
    n_test: int = 200
    min_refs: int = 2
    max_refs: int = 4
    hidden: int = 128
    emb: int = 64
    lr: float = 1e-4
    epochs: int = 15
    classifier_epochs: int = 15
    batch: int = 32
    beam: int = 8
    max_len: int = 10
    middleout_variant: str = "dual"
    baseline_variant: str = "none"
    seed: int = 0

    @property
    def feature_size(self) -> int:
        return len(ACTORS) + len(VERBS) + len(OBJECTS)


@dataclass
class ToyScene:
    actor: int
    verb: int
    object: int
    features: np.ndarray          # (T, F)
    refs: list[list[str]]

    @property
    def verb_word(self) -> str:
        return VERBS[self.verb]

    def to_json(self) -> str:
        return json.dumps({"actor": self.actor, "verb": self.verb, "object": self.object,
                           "features": self.features.tolist(), "refs": self.refs})

    @classmethod
    def from_json(cls, line: str) -> "ToyScene":
        d = json.loads(line)
        return cls(int(d["actor"]), int(d["verb"]), int(d["object"]),
                   np.array(d["features"], dtype=np.float64), [list(r) for r in d["refs"]])


def caption_vocab() -> Vocab:
    return Vocab(list(FUNCTION_WORDS) + list(ACTORS) + list(VERBS) + list(OBJECTS))


def scene_features(actor: int, verb: int, obj: int, frames: int, noise: float, rng: RngStream) -> np.ndarray:
    code = np.zeros(len(ACTORS) + len(VERBS) + len(OBJECTS))
    code[actor] = 1.0
    code[len(ACTORS) + verb] = 1.0
    code[len(ACTORS) + len(VERBS) + obj] = 1.0
    feats = np.tile(code, (frames, 1))
    if noise > 0:
        feats += noise * rng.normal_array(feats.size).reshape(feats.shape)
    return feats


def render(template: str, actor: int, verb: int, obj: int) -> list[str]:
    return template.format(actor=ACTORS[actor], verb=VERBS[verb], object=OBJECTS[obj]).split()


def generate_toy_dataset(config: ToyCaptionConfig, rng: RngStream) -> tuple[list[ToyScene], list[ToyScene]]:
    scenes = []
    for _ in range(config.n_train + config.n_test):
        actor, verb, obj = rng.randint(len(ACTORS)), rng.randint(len(VERBS)), rng.randint(len(OBJECTS))
        feats = scene_features(actor, verb, obj, config.frames, config.noise, rng)
        k = config.min_refs + rng.randint(config.max_refs - config.min_refs + 1)
        chosen = sorted(rng.permutation(len(TEMPLATES))[:k])
        refs = [render(TEMPLATES[t], actor, verb, obj) for t in chosen]
        scenes.append(ToyScene(actor, verb, obj, feats, refs))
    return scenes[:config.n_train], scenes[config.n_train:]


def write_corpus(path, scenes: list[ToyScene]) -> None:
    Path(path).write_text("".join(s.to_json() + "\n" for s in scenes))


def read_corpus(path) -> list[ToyScene]:
    return [ToyScene.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def scheduled_sampling_rate(epoch: int) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return min(0.05 * epoch, 0.25)


# -- training -----------------------------------------------------------------

@dataclass
class _Example:
    features: np.ndarray
    key: tuple
    arrays: tuple


def _caption_examples(family: str, vocab: Vocab, scenes: list[ToyScene]) -> list[_Example]:
    out = []
    for s in scenes:
        mid = vocab.stoi[s.verb_word]
        for ref in s.refs:
            ids = vocab.encode(ref)
            if family == "middleout":
                left, right = middle_out_targets(vocab, ids, mid)
                out.append(_Example(s.features, (len(left), len(right)), (left, right, mid)))
            else:
                out.append(_Example(s.features, (len(ids),), (ids, mid)))
    return out


def _epoch_batches(examples: list[_Example], batch: int, rng: RngStream):
    """Shuffled mini-batches whose members share a target shape."""
    pending: dict[tuple, list[int]] = {}
    for i in rng.permutation(len(examples)):
        group = pending.setdefault(examples[i].key, [])
        group.append(int(i))
        if len(group) == batch:
            yield [examples[j] for j in group]
            pending[examples[i].key] = []
    for key in sorted(pending):
        if pending[key]:
            yield [examples[j] for j in pending[key]]


@dataclass
class CaptionTrainResult:
    model: object
    losses: list[tuple[int, float]] = field(default_factory=list)    # (epoch, mean loss)


def _fit(model, loss_fn, examples, config: ToyCaptionConfig, epochs: int, rng: RngStream, name: str,
         progress=None) -> list[tuple[int, float]]:
    opt = Adam(model.store, lr=config.lr)
    history = []
    for epoch in range(epochs):
        rate = scheduled_sampling_rate(epoch)
        values = []
        for group in _epoch_batches(examples, config.batch, rng):
            with Tape() as tape:
                loss = loss_fn(group, rate)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"{name}: non-finite loss at epoch {epoch}")
            backward(loss, tape, model.store)
            opt.step()
            values.append(value)
        history.append((epoch, float(np.mean(values))))
        if progress is not None:
            progress(epoch, history[-1][1])
    return history


def train_caption(family: str, config: ToyCaptionConfig, train: list[ToyScene], variant: str | None = None,
                  oracle_input: bool = False, progress=None) -> CaptionTrainResult:
    """Cross-entropy training with scheduled sampling; ``family`` is ``baseline`` or ``middleout``."""
    vocab = caption_vocab()
    if family == "middleout":
        if oracle_input:
            raise ContractError("the oracle-input flag applies to the baseline only")
        variant = variant or config.middleout_variant
        model = MiddleOutModel(vocab, config.feature_size, config.emb, config.hidden, variant,
                               seed=config.seed * 1000 + 31)
    elif family == "baseline":
        variant = variant or config.baseline_variant
        model = Seq2SeqModel(vocab, config.feature_size, config.emb, config.hidden, variant,
                             seed=config.seed * 1000 + (53 if oracle_input else 47), oracle_input=oracle_input)
    else:
        raise ContractError(f"unknown model family {family!r}")
    examples = _caption_examples(family, vocab, train)
    stream = RngStream(config.seed).spawn(hash_tag(f"{family}-{oracle_input}"))
    sampler = stream.spawn(1)

    def loss_fn(group, rate):
        feats = np.stack([e.features for e in group])
        if family == "middleout":
            left = np.array([e.arrays[0] for e in group])
            right = np.array([e.arrays[1] for e in group])
            mids = np.array([e.arrays[2] for e in group])
            return model.loss(feats, left, right, mids, rate, sampler)
        tokens = np.array([e.arrays[0] for e in group])
        mids = np.array([e.arrays[1] for e in group])
        return model.loss(feats, tokens, mids, rate, sampler)

    history = _fit(model, loss_fn, examples, config, config.epochs, stream.spawn(2), family, progress)
    return CaptionTrainResult(model, history)


def train_oracle_baseline(config: ToyCaptionConfig, train: list[ToyScene], progress=None) -> CaptionTrainResult:
    """Baseline whose every step input also carries the middle-word embedding."""
    return train_caption("baseline", config, train, oracle_input=True, progress=progress)


def train_classifier(config: ToyCaptionConfig, train: list[ToyScene], progress=None) -> CaptionTrainResult:
    """Middle-word classifier (features -> scene verb), trained on its own cross-entropy."""
    clf = MiddleWordClassifier(len(VERBS), config.feature_size, config.hidden, seed=config.seed * 1000 + 59)
    examples = [_Example(s.features, (), (s.verb,)) for s in train]

    def loss_fn(group, rate):
        return clf.loss(np.stack([e.features for e in group]), np.array([e.arrays[0] for e in group]))

    stream = RngStream(config.seed).spawn(hash_tag("classifier"))
    history = _fit(clf, loss_fn, examples, config, config.classifier_epochs, stream, "classifier", progress)
    return CaptionTrainResult(clf, history)


def hash_tag(text: str) -> int:
    """Stable 64-bit tag for deriving child random streams from a label."""
    h = 0xCBF29CE484222325
    for byte in text.encode():
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


# -- inference ----------------------------------------------------------------

def verb_id(vocab: Vocab, word: str) -> int:
    if word not in VERBS:
        raise ContractError(f"middle word {word!r} is not in the verb vocabulary")
    return vocab.stoi[word]


def classifier_words(classifier: MiddleWordClassifier, scenes: list[ToyScene]) -> list[str]:
    probs = classifier.predict_proba(np.stack([s.features for s in scenes]))
    return [VERBS[int(i)] for i in np.argmax(probs, axis=1)]


def caption(model, features, middle_word: str | None = None, beam: int = 8, max_len: int = 10,
            classifier: MiddleWordClassifier | None = None) -> list[str]:
    """Best beam caption.  Middle-out needs ``middle_word`` or a classifier for its top-1 word."""
    vocab = model.vocab
    features = np.asarray(features, dtype=np.float64)
    if isinstance(model, MiddleOutModel):
        if middle_word is None:
            if classifier is None:
                raise ContractError("middle-out captioning needs a middle word or a classifier")
            middle_word = VERBS[int(np.argmax(classifier.predict_proba(features[None])[0]))]
        hyps = model.beam_search(features, [(verb_id(vocab, middle_word), 0.0)], beam, max_len)
    else:
        middle = verb_id(vocab, middle_word) if model.oracle_input else None
        hyps = model.beam_search(features, beam, middle, 2 * max_len)
    return vocab.decode(hyps[0].tokens())


def evaluate_captions(model, scenes: list[ToyScene], middle_words: list[str] | None = None, beam: int = 8,
                      max_len: int = 10, classifier=None) -> dict:
    """Corpus BLEU-4 and mean ROUGE-L of the best beam caption per scene."""
    cands = []
    for i, s in enumerate(scenes):
        word = middle_words[i] if middle_words is not None else None
        cands.append(caption(model, s.features, word, beam, max_len, classifier))
    refs = [s.refs for s in scenes]
    return {"bleu4": corpus_bleu(cands, refs), "rouge_l": corpus_rouge_l(cands, refs), "captions": cands}


@dataclass
class SweepRow:
    label: str
    accuracy: float
    bleu4: float
    rouge_l: float


def run_oracle_sweep(model: MiddleOutModel, classifier: MiddleWordClassifier, scenes: list[ToyScene],
                     rng: RngStream, levels=(0.5, 0.75), beam: int = 8, max_len: int = 10) -> list[SweepRow]:
    """Middle-out quality at the raw classifier accuracy, the given corrupted levels and 100%.

    Intermediate levels replace the oracle verb by a random wrong verb at rate
    ``1 - level``.  Rows are ordered by measured accuracy.
    """
    oracle = [s.verb_word for s in scenes]
    settings = [("raw", classifier_words(classifier, scenes))]
    for level in levels:
        settings.append((f"{round(level * 100)}%", simulate_classifier_accuracy(
            oracle, level, rng.spawn(hash_tag(f"level-{level}")), corruption_vocab=VERBS)))
    settings.append(("100%", oracle))
    rows = []
    for label, words in settings:
        acc = float(np.mean([w == o for w, o in zip(words, oracle)]))
        res = evaluate_captions(model, scenes, words, beam, max_len)
        rows.append(SweepRow(label, acc, res["bleu4"], res["rouge_l"]))
    rows.sort(key=lambda r: r.accuracy)
    return rows


@dataclass
class DiversityReport:
    self_bleu: float
    distinct_verbs: float


def beam_captions(model, features, beam: int = 8, max_len: int = 10,
                  classifier: MiddleWordClassifier | None = None) -> list[list[str]]:
    """All beam outputs; middle-out seeds one beam per top-``beam`` classifier word."""
    vocab = model.vocab
    if isinstance(model, MiddleOutModel):
        if classifier is None:
            raise ContractError("middle-out diversity decoding needs the classifier")
        seeds = [(vocab.stoi[VERBS[c]], lp) for c, lp in classifier.top_k(features[None], beam)[0]]
        hyps = model.beam_search(features, seeds, beam, max_len)
    else:
        hyps = model.beam_search(features, beam, None, 2 * max_len)
    return [vocab.decode(h.tokens()) for h in hyps]


def run_diversity_eval(model, scenes: list[ToyScene], classifier=None, beam: int = 8,
                       max_len: int = 10) -> DiversityReport:
    """Mean Self-BLEU over the beam outputs of each scene (lower is more diverse)."""
    scores, verbs = [], []
    for s in scenes:
        caps = beam_captions(model, s.features, beam, max_len, classifier)
        scores.append(self_bleu(caps) if len(caps) >= 2 else 1.0)
        verbs.append(len({w for c in caps for w in c if w in VERBS}))
    return DiversityReport(float(np.mean(scores)), float(np.mean(verbs)))


# -- control experiment ---------------------------------------------------------

@dataclass
class ControlPair:
    a: ToyScene
    b: ToyScene
    target: int            # 0 -> scene a, 1 -> scene b

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.a.features, self.b.features], axis=0)

    @property
    def middle_word(self) -> str:
        return (self.a, self.b)[self.target].verb_word


def make_control_pairs(scenes: list[ToyScene], n_pairs: int, rng: RngStream) -> list[ControlPair]:
    """Pairs of scenes differing in actor, verb and object, with a random target scene."""
    pairs = []
    while len(pairs) < n_pairs:
        i, j = rng.randint(len(scenes)), rng.randint(len(scenes))
        a, b = scenes[i], scenes[j]
        if a.actor == b.actor or a.verb == b.verb or a.object == b.object:
            continue
        pairs.append(ControlPair(a, b, rng.randint(2)))
    return pairs


def control_verdict(tokens: list[str], a: ToyScene, b: ToyScene) -> int | None:
    """Scene (0 or 1) whose actor and object the caption names more of; None on a tie."""
    words = set(tokens)
    hits = [(ACTORS[s.actor] in words) + (OBJECTS[s.object] in words) for s in (a, b)]
    if hits[0] == hits[1]:
        return None
    return 0 if hits[0] > hits[1] else 1


@dataclass
class ControlResult:
    caption: list[str]
    verdict: int | None
    contains_middle: bool


def run_control_eval(model, scene_a: ToyScene, scene_b: ToyScene, middle_word: str, beam: int = 8,
                     max_len: int = 10) -> ControlResult:
    """Caption the concatenation of two scenes steered by ``middle_word``."""
    verb_id(model.vocab, middle_word)
    if isinstance(model, Seq2SeqModel) and not model.oracle_input:
        raise ContractError("the control experiment needs a middle-out or oracle-input model")
    feats = np.concatenate([scene_a.features, scene_b.features], axis=0)
    cap = caption(model, feats, middle_word, beam, max_len)
    return ControlResult(cap, control_verdict(cap, scene_a, scene_b), middle_word in cap)


@dataclass
class ControlReport:
    targeting: float
    contains_middle: float
    results: list[ControlResult]


def control_targeting(model, pairs: list[ControlPair], beam: int = 8, max_len: int = 10) -> ControlReport:
    results = [run_control_eval(model, p.a, p.b, p.middle_word, beam, max_len) for p in pairs]
    hit = [r.verdict == p.target for r, p in zip(results, pairs)]
    return ControlReport(float(np.mean(hit)), float(np.mean([r.contains_middle for r in results])), results)
