import numpy as np
import pytest

from midout.caption import (ACTORS, OBJECTS, TEMPLATES, VERBS, ToyCaptionConfig, ToyScene, caption, caption_vocab,
                            classifier_words, control_verdict, evaluate_captions, generate_toy_dataset,
                            make_control_pairs, read_corpus, run_control_eval, run_diversity_eval, run_oracle_sweep,
                            scene_features, scheduled_sampling_rate, train_caption, train_classifier, write_corpus)
from midout.decoding import MiddleOutModel, MiddleWordClassifier, Seq2SeqModel
from midout.rng import RngStream
from midout.tensor import ContractError

SMALL = dict(n_train=40, n_test=6, hidden=8, emb=6, epochs=2, classifier_epochs=2, batch=8, beam=2, max_len=6)


def small_config(**kw):
    return ToyCaptionConfig(**{**SMALL, **kw})


def test_sampling_schedule():
    assert scheduled_sampling_rate(0) == 0.0
    assert scheduled_sampling_rate(3) == pytest.approx(0.15)
    assert scheduled_sampling_rate(5) == 0.25
    assert scheduled_sampling_rate(10) == 0.25
    rates = [scheduled_sampling_rate(e) for e in range(20)]
    assert rates == sorted(rates)


def test_inventories_and_vocab():
    assert (len(ACTORS), len(VERBS), len(OBJECTS)) == (8, 12, 10)
    assert all(v.endswith("ing") for v in VERBS)
    assert "performing" in VERBS
    v = caption_vocab()
    for t in TEMPLATES:
        v.encode(t.format(actor=ACTORS[0], verb=VERBS[0], object=OBJECTS[0]).split())


def test_dataset_invariants():
    cfg = ToyCaptionConfig()
    train, test = generate_toy_dataset(cfg, RngStream(0))
    assert len(train) == 2000 and len(test) == 200
    for s in train[:300] + test:
        assert s.features.shape == (8, 30)
        assert 2 <= len(s.refs) <= 4
        assert len({tuple(r) for r in s.refs}) == len(s.refs)
        for ref in s.refs:
            assert ref.count(s.verb_word) == 1
            assert sum(w in VERBS for w in ref) == 1


def test_noiseless_features_are_one_hot():
    f = scene_features(2, 5, 7, 3, 0.0, RngStream(0))
    assert f.shape == (3, 30)
    assert np.argmax(f[0, 8:20]) == 5 and f.sum() == 9.0


def test_dataset_deterministic_and_round_trip(tmp_path):
    cfg = small_config()
    a, _ = generate_toy_dataset(cfg, RngStream(4))
    b, _ = generate_toy_dataset(cfg, RngStream(4))
    write_corpus(tmp_path / "a.jsonl", a)
    write_corpus(tmp_path / "b.jsonl", b)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = read_corpus(tmp_path / "a.jsonl")
    assert [s.refs for s in back] == [s.refs for s in a]
    assert all(np.array_equal(s.features, t.features) for s, t in zip(a, back))


def _scene(actor, verb, obj):
    return ToyScene(actor, verb, obj, np.zeros((2, 30)), [["x"]])


def test_control_verdict():
    a, b = _scene(0, 0, 0), _scene(1, 1, 1)
    assert control_verdict("a man is playing a guitar".split(), a, b) == 0
    assert control_verdict("a woman is riding a piano".split(), a, b) == 1
    assert control_verdict("a man is riding a piano".split(), a, b) is None
    assert control_verdict("a dog is riding a car".split(), a, b) is None


def test_control_pairs_differ_in_everything():
    _, test = generate_toy_dataset(small_config(n_test=30), RngStream(1))
    for p in make_control_pairs(test, 25, RngStream(2)):
        assert p.a.actor != p.b.actor and p.a.verb != p.b.verb and p.a.object != p.b.object
        assert p.features.shape == (16, 30)
        assert p.middle_word == (p.a, p.b)[p.target].verb_word


def test_control_eval_contains_middle_and_rejects_non_verb():
    m = MiddleOutModel(caption_vocab(), 30, 6, 8, "dual", seed=0)
    a, b = _scene(0, 4, 0), _scene(1, 1, 1)
    res = run_control_eval(m, a, b, "performing", beam=2, max_len=5)
    assert "performing" in res.caption and res.contains_middle
    with pytest.raises(ContractError):
        run_control_eval(m, a, b, "guitar")
    with pytest.raises(ContractError):
        run_control_eval(Seq2SeqModel(caption_vocab(), 30, 6, 8, "none"), a, b, "playing")


def test_short_training_pipeline():
    cfg = small_config()
    train, test = generate_toy_dataset(cfg, RngStream(0))
    clf = train_classifier(cfg, train).model
    mo = train_caption("middleout", cfg, train)
    base = train_caption("baseline", cfg, train)
    assert len(mo.losses) == 2 and all(np.isfinite(l) for _, l in mo.losses)
    # every middle-out caption contains the seeded verb
    words = classifier_words(clf, test)
    res = evaluate_captions(mo.model, test, words, beam=2, max_len=6)
    assert all(w in c for w, c in zip(words, res["captions"]))
    assert 0.0 <= res["bleu4"] <= 1.0
    assert caption(mo.model, test[0].features, classifier=clf, beam=2, max_len=6) == res["captions"][0]
    assert len(evaluate_captions(base.model, test, beam=2)["captions"]) == len(test)
    # the 100% row of the sweep is the pure-oracle evaluation
    rows = run_oracle_sweep(mo.model, clf, test, RngStream(5), beam=2, max_len=6)
    oracle = evaluate_captions(mo.model, test, [s.verb_word for s in test], beam=2, max_len=6)
    full = [r for r in rows if r.label == "100%"][0]
    assert full.accuracy == 1.0 and full.bleu4 == oracle["bleu4"]
    assert [r.accuracy for r in rows] == sorted(r.accuracy for r in rows)
    div = run_diversity_eval(mo.model, test, clf, beam=2, max_len=6)
    assert 0.0 <= div.self_bleu <= 1.0


def test_training_is_reproducible():
    cfg = small_config(epochs=1)
    train, _ = generate_toy_dataset(cfg, RngStream(0))
    a = train_caption("middleout", cfg, train)
    b = train_caption("middleout", cfg, train)
    assert a.losses == b.losses
    assert all(np.array_equal(a.model.store[n].data, b.model.store[n].data) for n in a.model.store.names())


def test_caption_needs_word_or_classifier():
    m = MiddleOutModel(caption_vocab(), 30, 6, 8, "dual", seed=0)
    with pytest.raises(ContractError):
        caption(m, np.zeros((8, 30)))
    clf = MiddleWordClassifier(len(VERBS), 30, 8, seed=0)
    assert len(caption(m, np.zeros((8, 30)), classifier=clf, beam=2, max_len=4)) >= 1
