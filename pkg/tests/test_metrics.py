import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midout.metrics import bleu4, corpus_bleu, corpus_rouge_l, mse, rouge_l, self_bleu, sentence_bleu, symmetric_mse
from midout.tensor import ContractError


def toks(s):
    return s.split()


# -- BLEU ---------------------------------------------------------------------------

def test_bleu_example_one_word_off():
    # precisions 4/5, 3/4, 2/3, 1/2 multiply to 0.2
    assert bleu4(toks("a b c d e"), [toks("a b c d f")]) == pytest.approx(0.2 ** 0.25, abs=1e-6)


def test_bleu_identity():
    x = toks("a man is playing a guitar")
    assert bleu4(x, [x]) == 1.0
    assert bleu4([x], [[x]], mode="corpus") == 1.0


def test_bleu_disjoint_is_zero():
    assert bleu4(toks("a b c d"), [toks("w x y z")]) == 0.0
    assert bleu4([toks("a b c d")], [[toks("w x y z")]], mode="corpus") == 0.0


def test_bleu_smoothing_only_above_unigrams():
    # no bigram matches: smoothed order 2..4 precisions are 1/(t+1)
    cand, ref = toks("a b"), toks("b a")
    expected = math.exp((math.log(1.0) + math.log(1 / 2) + math.log(1 / 1) + math.log(1 / 1)) / 4)
    assert sentence_bleu(cand, [ref]) == pytest.approx(expected, rel=1e-12)
    assert sentence_bleu(cand, [ref], smooth=False) == 0.0


def test_bleu_brevity_penalty():
    ref = toks("a b c d e f g h")
    cand = toks("a b c d")
    assert sentence_bleu(cand, [ref]) == pytest.approx(math.exp(1 - 8 / 4), rel=1e-12)


def test_bleu_empty_candidate_and_no_refs():
    assert bleu4([], [toks("a b")]) == 0.0
    with pytest.raises(ContractError):
        bleu4(toks("a"), [])
    with pytest.raises(ContractError):
        bleu4(toks("a"), [toks("a")], mode="weird")


try:
    from nltk.translate import bleu_score as nltk_bleu
except ImportError:  # pragma: no cover
    nltk_bleu = None
needs_nltk = pytest.mark.skipif(nltk_bleu is None, reason="nltk not installed")
quiet_nltk = pytest.mark.filterwarnings("ignore::UserWarning")

word = st.sampled_from(list("abcdef"))
sentence = st.lists(word, min_size=4, max_size=9)


@needs_nltk
@quiet_nltk
@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(sentence, st.lists(sentence, min_size=1, max_size=3)), min_size=1, max_size=6))
def test_corpus_bleu_matches_nltk(pairs):
    cands = [c for c, _ in pairs]
    refs = [r for _, r in pairs]
    ours = corpus_bleu(cands, refs)
    theirs = nltk_bleu.corpus_bleu(refs, cands)
    assert ours == pytest.approx(theirs, abs=1e-12)


@needs_nltk
@quiet_nltk
@settings(max_examples=60, deadline=None)
@given(sentence, st.lists(sentence, min_size=1, max_size=3))
def test_unsmoothed_sentence_bleu_matches_nltk(cand, refs):
    ours = sentence_bleu(cand, refs, smooth=False)
    theirs = nltk_bleu.sentence_bleu(refs, cand)
    assert ours == pytest.approx(theirs, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(sentence, st.lists(sentence, min_size=1, max_size=3), st.permutations(list("abcdef")))
def test_bleu_invariant_under_token_relabeling(cand, refs, perm):
    mapping = dict(zip("abcdef", perm))
    relabel = lambda s: [mapping[t] for t in s]  # noqa: E731
    assert sentence_bleu(cand, refs) == sentence_bleu(relabel(cand), [relabel(r) for r in refs])
    assert rouge_l(cand, refs) == rouge_l(relabel(cand), [relabel(r) for r in refs])


# -- ROUGE-L -------------------------------------------------------------------------

def test_rouge_l_example():
    # LCS("a b c d", "a c e") = 2 -> P = 1/2, R = 2/3
    p, r, b = 0.5, 2 / 3, 1.2
    expected = (1 + b * b) * p * r / (r + b * b * p)
    assert rouge_l(toks("a b c d"), [toks("a c e")]) == pytest.approx(expected, rel=1e-12)


def test_rouge_l_best_reference_and_edges():
    assert rouge_l(toks("a b"), [toks("x y"), toks("a b")]) == pytest.approx(1.0)
    assert rouge_l([], [toks("a")]) == 0.0
    assert rouge_l(toks("a"), [toks("b")]) == 0.0
    assert corpus_rouge_l([toks("a b"), toks("c")], [[toks("a b")], [toks("d")]]) == pytest.approx(0.5)


# -- Self-BLEU ------------------------------------------------------------------------

def test_self_bleu_identical_and_disjoint():
    same = [toks("a man is playing a guitar")] * 4
    assert self_bleu(same) == 1.0
    assert self_bleu([toks("a b c d"), toks("e f g h"), toks("i j k l")]) == 0.0


def test_self_bleu_needs_two():
    with pytest.raises(ContractError):
        self_bleu([toks("a b")])


def test_self_bleu_lower_for_more_diverse_set():
    base = toks("a man is playing a guitar")
    similar = [base, toks("a man is playing the guitar"), toks("the man is playing a guitar")]
    diverse = [base, toks("a woman is slicing an onion"), toks("the dog is chasing a ball")]
    assert self_bleu(diverse) < self_bleu(similar)


# -- regression metrics ----------------------------------------------------------------

def test_symmetric_mse_example():
    assert symmetric_mse([1.0, 0.0, 3.0]) == 4.0


def test_symmetric_mse_zero_for_mirror_and_errors():
    assert symmetric_mse([0.1, 0.7, 0.3, 0.7, 0.1]) == 0.0
    for bad in ([1.0], [1.0, 2.0], [[1.0, 2.0, 3.0]]):
        with pytest.raises(ContractError):
            symmetric_mse(bad)


def test_mse_pools_positions():
    preds = [np.array([1.0, 2.0, 3.0]), np.array([0.0])]
    golds = [np.array([1.0, 2.0, 4.0]), np.array([2.0])]
    assert mse(preds, golds) == pytest.approx((1.0 + 4.0) / 4)
    with pytest.raises(ContractError):
        mse([np.zeros(2)], [np.zeros(3)])
