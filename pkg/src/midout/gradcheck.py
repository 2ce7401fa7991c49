"""Central-difference gradient checks for every primitive and every model variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoding import MiddleOutModel, MiddleWordClassifier, Seq2SeqModel, Vocab, middle_out_targets
from .denoise import DenoiseModel
from .rng import RngStream

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _dims(rng: RngStream, k: int, lo: int = 1, hi: int = 5) -> list[int]:
    return [lo + rng.randint(hi - lo + 1) for _ in range(k)]


def _reduce(outputs, rng: RngStream):
    """Scalar loss from one or more tensors: sum of MSEs against random targets."""
    outs = outputs if isinstance(outputs, (tuple, list)) else (outputs,)
    targets = [rng.normal_array(o.data.size).reshape(o.shape) for o in outs]

    def loss(vals):
        return T.add_scalars([T.mean_squared(v, t) for v, t in zip(vals, targets)])
    return loss


def _primitive_case(name: str, rng: RngStream):
    """(store, forward) for one random instance of primitive ``name``."""
    store = T.ParameterStore()

    def p(key, *shape, scale=1.0):
        return store.add(key, scale * rng.normal_array(int(np.prod(shape))).reshape(shape))

    if name in ("add", "sub", "mul"):
        shape = _dims(rng, 2)
        a, b = p("a", *shape), p("b", *shape)
        fn = {"add": T.add, "sub": T.sub, "mul": T.mul}[name]
        forward = lambda: fn(a, b)
    elif name == "scale":
        a = p("a", *_dims(rng, 2))
        forward = lambda: T.scale(a, -1.7)
    elif name == "add_scalars":
        terms = [p(f"s{i}", 1) for i in range(3)]
        forward = lambda: T.add_scalars([T.mul(t, t) for t in terms])
    elif name == "matmul":
        m, k, n = _dims(rng, 3)
        a, b = p("a", m, k), p("b", k, n)
        forward = lambda: T.matmul(a, b)
    elif name == "matmul_vec":
        k, n = _dims(rng, 2)
        a, b = p("a", k), p("b", k, n)
        forward = lambda: T.matmul(a, b)
    elif name == "linear":
        bsz, d, o = _dims(rng, 3)
        x, w, b = p("x", bsz, d), p("w", o, d), p("b", o)
        forward = lambda: T.linear(x, w, b)
    elif name == "concat":
        r = _dims(rng, 1)[0]
        a, b = p("a", r, _dims(rng, 1)[0]), p("b", r, _dims(rng, 1)[0])
        forward = lambda: T.concat([a, b], axis=-1)
    elif name == "stack":
        shape = _dims(rng, 2)
        a, b = p("a", *shape), p("b", *shape)
        forward = lambda: T.stack([a, b], axis=1)
    elif name in ("tanh", "sigmoid"):
        a = p("a", *_dims(rng, 2))
        forward = lambda: getattr(T, name)(a)
    elif name in ("softmax", "log_softmax"):
        a = p("a", *_dims(rng, 2, 2, 5))
        forward = lambda: getattr(T, name)(a, axis=-1)
    elif name == "mean_squared":
        shape = _dims(rng, 2)
        a, b = p("a", *shape), p("b", *shape)
        return store, lambda: T.mean_squared(a, b)
    elif name == "cross_entropy":
        bsz, v = _dims(rng, 2, 2, 6)
        a = p("a", bsz, v)
        labels = rng.randint_array(bsz, v)
        return store, lambda: T.cross_entropy(a, labels)
    elif name == "weighted_sum":
        bsz, m, k = _dims(rng, 3)
        w, v = p("w", bsz, m), p("v", bsz, m, k)
        forward = lambda: T.weighted_sum(w, v)
    elif name == "batched_dot":
        bsz, m, k = _dims(rng, 3)
        keys, q = p("k", bsz, m, k), p("q", bsz, k)
        forward = lambda: T.batched_dot(keys, q)
    elif name == "bilinear_attention":
        bsz, m, qd, kd = _dims(rng, 4)
        # moderate scales keep the softmax out of saturation, where gradients vanish below roundoff
        q, w, mem = p("q", bsz, qd, scale=0.5), p("w", qd, kd, scale=0.5), p("m", bsz, m, kd)
        forward = lambda: T.bilinear_attention(q, w, mem)
    elif name == "take_rows":
        v, e = _dims(rng, 2, 2, 6)
        table = p("E", v, e)
        ids = rng.randint_array(4, v)
        forward = lambda: T.take_rows(table, ids)
    elif name == "lstm_cell":
        bsz, d, h = _dims(rng, 3)
        x, h0, c0 = p("x", bsz, d), p("h", bsz, h), p("c", bsz, h)
        w, b = p("w", 4 * h, d + h, scale=0.5), p("b", 4 * h, scale=0.5)
        forward = lambda: T.lstm_cell(x, h0, c0, w, b)
    elif name in ("lstm_sequence", "lstm_sequence_reverse"):
        bsz, n, d, h = _dims(rng, 4)
        x = p("x", bsz, n, d)
        w, b = p("w", 4 * h, d + h, scale=0.5), p("b", 4 * h, scale=0.5)
        rev = name.endswith("reverse")
        forward = lambda: T.lstm_sequence(x, w, b, reverse=rev)
    else:
        raise T.ContractError(f"unknown primitive {name!r}")
    outputs = forward()
    reduce = _reduce(outputs, rng.spawn(7))
    return store, lambda: reduce(forward() if isinstance(outputs, (tuple, list)) else (forward(),))


PRIMITIVES = ("add", "sub", "mul", "scale", "add_scalars", "matmul", "matmul_vec", "linear", "concat", "stack",
              "tanh", "sigmoid", "softmax", "log_softmax", "mean_squared", "cross_entropy", "weighted_sum",
              "batched_dot", "bilinear_attention", "take_rows", "lstm_cell", "lstm_sequence",
              "lstm_sequence_reverse")


def check_primitive(name: str, trials: int = 5, n_coords: int = 20, seed: int = 0) -> CheckResult:
    worst = 0.0
    for trial in range(trials):
        rng = RngStream(seed).spawn(1000 * trial + PRIMITIVES.index(name))
        store, loss_fn = _primitive_case(name, rng)
        worst = max(worst, T.grad_check(loss_fn, store, n_coords=n_coords, rng=rng.spawn(99)))
    return CheckResult(name, worst, trials * n_coords)


def rescale_parameters(store: T.ParameterStore, rng: RngStream, scale: float = 0.5) -> None:
    """Redraw every parameter uniformly in [-scale, scale] (keeps gradients well away from zero)."""
    for name in store.names():
        p = store[name]
        p.data[...] = rng.uniform_array(p.data.size, -scale, scale).reshape(p.shape)


def tiny_vocab() -> Vocab:
    return Vocab(["a", "man", "is", "playing", "piano"])


def caption_case(family: str, variant: str, seed: int = 0, oracle_input: bool = False):
    """(store, loss closure) for a small caption model on a fixed two-item batch."""
    vocab = tiny_vocab()
    rng = RngStream(seed).spawn(11)
    feats = rng.normal_array(2 * 3 * 4).reshape(2, 3, 4)
    ids = [vocab.encode("a man is playing piano".split()), vocab.encode("a piano is playing man".split())]
    mid = vocab.stoi["playing"]
    if family == "middleout":
        model = MiddleOutModel(vocab, 4, 5, 6, variant, seed=seed)
        splits = [middle_out_targets(vocab, t, mid) for t in ids]
        left = np.array([s[0] for s in splits])
        right = np.array([s[1] for s in splits])
        loss = lambda: model.loss(feats, left, right, np.array([mid, mid]))
    else:
        model = Seq2SeqModel(vocab, 4, 5, 6, variant, seed=seed, oracle_input=oracle_input)
        loss = lambda: model.loss(feats, np.array(ids), np.array([mid, mid]))
    rescale_parameters(model.store, rng.spawn(3))
    return model.store, loss


def denoise_case(family: str, self_attention: bool, seed: int = 0):
    model = DenoiseModel(family, hidden=5, self_attention=self_attention, seed=seed)
    rng = RngStream(seed).spawn(13)
    y = np.stack([np.linspace(-0.5, 0.4, 7), np.linspace(0.3, -0.2, 7)])
    x = y + 0.01 * rng.normal_array(y.size).reshape(y.shape)
    rescale_parameters(model.store, rng.spawn(3))
    return model.store, lambda: model.loss(x, y)


def classifier_case(seed: int = 0):
    clf = MiddleWordClassifier(4, 3, 5, seed=seed)
    rng = RngStream(seed).spawn(17)
    feats = rng.normal_array(2 * 4 * 3).reshape(2, 4, 3)
    rescale_parameters(clf.store, rng.spawn(3))
    return clf.store, lambda: clf.loss(feats, np.array([1, 3]))


MODEL_CASES = ("baseline/none", "baseline/output", "baseline/hidden", "baseline/dual", "middleout/none",
               "middleout/output", "middleout/hidden", "middleout/dual", "baseline/none+oracle_input",
               "denoise/baseline", "denoise/middleout", "classifier")


def model_case(name: str, seed: int = 0):
    if name not in MODEL_CASES:
        raise T.ContractError(f"unknown model case {name!r}")
    if name == "classifier":
        return classifier_case(seed)
    family, variant = name.split("/")
    if family == "denoise":
        return denoise_case(variant, variant == "middleout", seed)
    if variant.endswith("+oracle_input"):
        return caption_case(family, variant.split("+")[0], seed, oracle_input=True)
    return caption_case(family, variant, seed)


def check_model(name: str, n_coords: int = 40, seed: int = 0) -> CheckResult:
    store, loss_fn = model_case(name, seed)
    err = T.grad_check(loss_fn, store, n_coords=n_coords, rng=RngStream(seed).spawn(23))
    return CheckResult(name, err, n_coords)


def run_all(n_coords: int = 20) -> list[CheckResult]:
    results = [check_primitive(name, n_coords=n_coords) for name in PRIMITIVES]
    results += [check_model(name, n_coords=2 * n_coords) for name in MODEL_CASES]
    return results
