import numpy as np
import pytest

from midout import tensor as T
from midout.decoding import (LEFT, RIGHT, MiddleOutModel, MiddleWordClassifier, Memories, Seq2SeqModel,
                             SelfAttnVariant, Vocab, alternation_order, classify_middle_word, middle_out_targets,
                             sampling_ratio, simulate_classifier_accuracy, split_at_middle)
from midout.gradcheck import MODEL_CASES, check_model
from midout.rng import RngStream
from midout.tensor import ContractError, Tape, backward

WORDS = ["a", "man", "is", "playing", "piano", "woman", "cutting", "onion", "the"]


def vocab():
    return Vocab(WORDS)


def features(seed=0, n=4, f=5, batch=None):
    shape = (n, f) if batch is None else (batch, n, f)
    return RngStream(seed).normal_array(int(np.prod(shape))).reshape(shape)


def middleout(variant="dual", seed=0):
    return MiddleOutModel(vocab(), 5, 6, 7, variant, seed=seed)


def baseline(variant="none", seed=0, oracle_input=False):
    return Seq2SeqModel(vocab(), 5, 6, 7, variant, seed=seed, oracle_input=oracle_input)


def randomize(model, seed=1, scale=0.6):
    rng = RngStream(seed)
    for name in model.store.names():
        p = model.store[name]
        p.data[...] = rng.uniform_array(p.data.size, -scale, scale).reshape(p.shape)


def force_head(model, side, token):
    head = model.side_modules[side].head
    head.w.data[...] = 0.0
    head.b.data[...] = 0.0
    head.b.data[token] = 50.0


# -- small helpers ---------------------------------------------------------------

def test_variant_parse():
    assert SelfAttnVariant.parse("output_only") is SelfAttnVariant.OUTPUT
    assert SelfAttnVariant.parse("dual").uses_output and SelfAttnVariant.parse("dual").uses_hidden
    with pytest.raises(ContractError):
        SelfAttnVariant.parse("triple")


def test_alternation_left_first_and_skips_finished_side():
    assert alternation_order(2, 2) == [LEFT, RIGHT, LEFT, RIGHT]
    assert alternation_order(1, 3) == [LEFT, RIGHT, RIGHT, RIGHT]
    assert alternation_order(2, 1, left_first=False) == [RIGHT, LEFT, LEFT]


def test_split_example_caption():
    v = vocab()
    ids = v.encode("a man is playing piano".split())
    left, right = middle_out_targets(v, ids, v.stoi["playing"])
    assert v.decode(left) == ["is", "man", "a", "<stop>"]
    assert v.decode(right) == ["piano", "<stop>"]


def test_split_sentence_final_middle():
    v = vocab()
    left, right = middle_out_targets(v, v.encode("a man is playing".split()), v.stoi["playing"])
    assert v.decode(right) == ["<stop>"]


def test_split_uses_first_occurrence_and_rejects_absent():
    assert split_at_middle([1, 2, 3, 2, 4], 2) == ([1], [3, 2, 4])
    with pytest.raises(ContractError):
        split_at_middle([1, 3], 2)


# -- decode step --------------------------------------------------------------------

def test_step_input_sizes_per_variant():
    # E = 6, 2H = 14, H = 7
    sizes = {"none": 6 + 14, "output": 6 + 14 + 6, "hidden": 6 + 14 + 7, "dual": 6 + 14 + 6 + 7}
    for variant, size in sizes.items():
        assert middleout(variant).side_modules[LEFT].cell.input_size == size
    assert baseline("none", oracle_input=True).side_modules[RIGHT].cell.input_size == 6 + 14 + 6


def test_dual_first_step_contexts():
    m = middleout("dual")
    enc = m.encode(features()[None])
    mid = m.vocab.stoi["playing"]
    seed_emb = m.embedding(np.array([mid]))
    _, logits, ctx = m.step(LEFT, enc, seed_emb, enc.init_state, Memories([seed_emb], []))
    assert np.allclose(ctx.d_t.data, seed_emb.data)
    assert np.array_equal(ctx.h_tilde.data, np.zeros((1, 7)))
    assert logits.shape == (1, len(m.vocab))


def test_decode_step_returns_distribution_and_leaves_memories():
    m = middleout("dual")
    enc = m.encode(features()[None])
    mem = Memories([m.embedding(np.array([3]))], [])
    _, probs = m.decode_step(RIGHT, enc, np.array([3]), enc.init_state, mem)
    assert probs.sum() == pytest.approx(1.0)
    assert len(mem.embeddings) == 1 and not mem.hidden


@pytest.mark.parametrize("name", MODEL_CASES)
def test_model_loss_gradients(name):
    assert check_model(name, n_coords=40).max_rel_error < 1e-4


def test_cross_decoder_gradient_through_hidden_memory():
    def right_grad(variant):
        m = middleout(variant)
        randomize(m)
        v = m.vocab
        enc_in = features(batch=1)
        with Tape() as tape:
            enc = m.encode(enc_in)
            seed = m.embedding(np.array([v.stoi["playing"]]))
            mem = Memories([seed], [])
            states = {LEFT: enc.init_state, RIGHT: enc.init_state}
            prev = {LEFT: seed, RIGHT: seed}
            loss = None
            for k, side in enumerate([LEFT, RIGHT, LEFT]):
                new, logits, _ = m.step(side, enc, prev[side], states[side], mem)
                emb = m.embedding(np.array([v.stoi["man"]]))
                mem.embeddings.append(emb)
                mem.hidden.append(new.h)
                states[side], prev[side] = new, emb
                if k == 2:
                    loss = T.cross_entropy(logits, [v.stoi["a"]])
        backward(loss, tape, m.store)
        return np.abs(m.store["decoder.right.cell.W"].grad).sum()

    assert right_grad("hidden") > 0
    assert right_grad("dual") > 0
    assert right_grad("none") == 0
    assert right_grad("output") == 0


# -- generation -----------------------------------------------------------------

def test_both_sides_stop_immediately():
    m = middleout()
    force_head(m, LEFT, m.vocab.stop)
    force_head(m, RIGHT, m.vocab.stop)
    mid = m.vocab.stoi["playing"]
    assert m.generate(features(), mid).tokens == [mid]


def test_left_stop_first_then_right_only():
    m = middleout()
    force_head(m, LEFT, m.vocab.stop)
    force_head(m, RIGHT, m.vocab.stoi["piano"])
    g = m.generate(features(), m.vocab.stoi["playing"], max_len_per_side=4)
    assert g.left == [] and len(g.right) == 4
    assert g.forced[RIGHT] and not g.forced[LEFT]


def test_generated_caption_contains_middle_at_split():
    for seed in range(10):
        m = middleout(seed=seed)
        randomize(m, seed)
        mid = m.vocab.stoi["cutting"]
        g = m.generate(features(seed), mid, max_len_per_side=5)
        assert g.tokens[len(g.left)] == mid


def test_generate_rejects_unknown_middle():
    with pytest.raises(ContractError):
        middleout().generate(features(), 999)


def _greedy_tokens(model, feats):
    if isinstance(model, MiddleOutModel):
        return model.generate(feats, model.vocab.stoi["playing"], 6).tokens
    return model.greedy(feats, max_len=12).tokens


def _beam1_tokens(model, feats):
    if isinstance(model, MiddleOutModel):
        return model.beam_search(feats, [(model.vocab.stoi["playing"], 0.0)], 1, 6)[0].tokens()
    return model.beam_search(feats, 1, max_len=12)[0].tokens()


@pytest.mark.parametrize("family", ["baseline", "middleout"])
def test_beam_one_equals_greedy(family):
    for seed in range(15):
        m = middleout("dual", seed) if family == "middleout" else baseline("dual", seed)
        randomize(m, seed + 100, scale=1.0)
        f = features(seed)
        assert _beam1_tokens(m, f) == _greedy_tokens(m, f)


def test_beam_hypotheses_are_finished_and_ranked():
    m = middleout()
    randomize(m, 3)
    hyps = m.beam_search(features(), [(m.vocab.stoi["playing"], 0.0)], 4, 5)
    assert len(hyps) == 4
    for h in hyps:
        assert h.finished
        assert h.score == pytest.approx(h.logprob + h.length)
    scores = [h.score for h in hyps]
    assert scores == sorted(scores, reverse=True)


def test_beam_seeded_with_distinct_middle_words():
    m = middleout()
    randomize(m, 4)
    words = ["a", "man", "is", "playing", "piano", "woman", "cutting", "onion"]
    seeds = [(m.vocab.stoi[w], -0.1 * i) for i, w in enumerate(words)]
    hyps = m.beam_search(features(), seeds, 8, 5)
    assert len(hyps) == 8
    assert len({h.middle for h in hyps}) == 8


def test_beam_rejects_bad_size():
    with pytest.raises(ContractError):
        baseline().beam_search(features(), 0)


def test_training_order_matches_generation_order():
    # the forced loss on the greedy output equals its mean negative log-probability
    for family in ("baseline", "middleout"):
        m = middleout("dual", 5) if family == "middleout" else baseline("dual", 5)
        randomize(m, 6, scale=1.0)
        v = m.vocab
        for side in m.side_modules:
            m.side_modules[side].head.b.data[v.stop] += 4.0
        f = features(7)
        if family == "middleout":
            mid = v.stoi["playing"]
            hyp = m.beam_search(f, [(mid, 0.0)], 1, 8)[0]
            assert not hyp.forced
            loss = m.loss(f[None], [hyp.left + [v.stop]], [hyp.right + [v.stop]], [mid])
            steps = len(hyp.left) + len(hyp.right) + 2
        else:
            hyp = m.beam_search(f, 1, max_len=16)[0]
            assert not hyp.forced
            loss = m.loss(f[None], [hyp.right])
            steps = len(hyp.right) + 1
        assert loss.item() == pytest.approx(-hyp.logprob / steps, rel=1e-10)


def test_middle_out_degenerates_to_baseline():
    base = baseline("none", seed=2)
    randomize(base, 8, scale=1.0)
    mo = middleout("none", seed=3)
    for name in base.store.names():
        mo.store[name].data[...] = base.store[name].data
    for seed in range(5):
        f = features(seed)
        g = mo.generate(f, mo.vocab.start, max_len_per_side=12, active_sides=(RIGHT,))
        assert g.tokens == base.greedy(f, max_len=12).tokens


def test_scheduled_sampling_keeps_targets():
    m = middleout("dual")
    v = m.vocab
    f = features(batch=2)
    ids = [v.encode("a man is playing piano".split())] * 2
    splits = [middle_out_targets(v, t, v.stoi["playing"]) for t in ids]
    left = np.array([s[0] for s in splits])
    right = np.array([s[1] for s in splits])
    mids = [v.stoi["playing"]] * 2
    a = m.loss(f, left, right, mids, 0.0, RngStream(0)).item()
    b = m.loss(f, left, right, mids, 1e-12, RngStream(0)).item()
    assert a == pytest.approx(b, rel=1e-12)
    left_copy = left.copy()
    m.loss(f, left, right, mids, 1.0, RngStream(1))
    assert np.array_equal(left, left_copy)


def test_oracle_input_needs_middle():
    m = baseline(oracle_input=True)
    with pytest.raises(ContractError):
        m.greedy(features())
    assert m.greedy(features(), middle=m.vocab.stoi["playing"], max_len=3).tokens is not None


# -- classifier and simulated accuracy ----------------------------------------------

def test_classifier_probabilities_and_top_k():
    clf = MiddleWordClassifier(4, 5, 6, seed=0)
    probs = classify_middle_word(clf, features(batch=3))
    assert probs.shape == (3, 4)
    assert np.allclose(probs.sum(axis=1), 1.0)
    top = clf.top_k(features(batch=3), 2)
    assert [k for k, _ in top[0]] == list(np.argsort(-probs[0], kind="stable")[:2])


def test_sampling_ratio_paper_values():
    assert sampling_ratio(0.50, 0.3164) == pytest.approx(0.7314, abs=5e-5)
    assert sampling_ratio(0.75, 0.3164) == pytest.approx(0.3657, abs=5e-5)
    assert sampling_ratio(1.0, 0.3164) == 0.0
    assert sampling_ratio(0.3164, 0.3164) == 1.0


def test_simulated_accuracy_end_points():
    oracle = [i % 5 for i in range(200)]
    clf = [(i + (i % 3 == 0)) % 5 for i in range(200)]
    raw = float(np.mean([a == b for a, b in zip(oracle, clf)]))
    assert simulate_classifier_accuracy(oracle, 1.0, RngStream(0), classifier_words=clf) == oracle
    assert simulate_classifier_accuracy(oracle, raw, RngStream(0), classifier_words=clf) == clf
    corrupted = simulate_classifier_accuracy(oracle, 0.0, RngStream(0), corruption_vocab=range(5))
    assert all(c != o for c, o in zip(corrupted, oracle))


def test_simulated_accuracy_in_expectation():
    oracle = [i % 12 for i in range(4000)]
    out = simulate_classifier_accuracy(oracle, 0.75, RngStream(3), corruption_vocab=range(12))
    assert np.mean([a == b for a, b in zip(out, oracle)]) == pytest.approx(0.75, abs=0.02)
    with pytest.raises(ContractError):
        simulate_classifier_accuracy(oracle, 1.5, RngStream(3), corruption_vocab=range(12))
