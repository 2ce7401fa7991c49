"""Sequence and caption metrics: MSE, symmetric MSE, BLEU-4, ROUGE-L, Self-BLEU.

Text metrics take token sequences (lists of hashable tokens) and return values
in [0, 1]; multiply by 100 for paper-style tables.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .tensor import ContractError

Tokens = Sequence[Hashable]


@dataclass
class MetricReport:
    name: str
    value: float
    count: int


def mse(preds, golds) -> float:
    """Mean squared error over all positions of all (pred, gold) pairs."""
    total, count = 0.0, 0
    for p, g in zip(preds, golds, strict=True):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ContractError(f"mse: length mismatch {p.shape} vs {g.shape}")
        total += float(np.sum((p - g) ** 2))
        count += p.size
    if count == 0:
        raise ContractError("mse of no values")
    return total / count


def symmetric_mse(seq) -> float:
    """(1/m) sum_j (seq[mid-j] - seq[mid+j])**2 for a sequence of length 2m+1."""
    s = np.asarray(seq, dtype=np.float64)
    if s.ndim != 1 or s.size < 3 or s.size % 2 == 0:
        raise ContractError(f"symmetric_mse needs an odd length >= 3, got {s.shape}")
    m = s.size // 2
    left = s[:m][::-1]
    right = s[m + 1:]
    return float(np.sum((left - right) ** 2) / m)


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(cand_len: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def _clipped_stats(cand: Tokens, refs: Sequence[Tokens], max_order: int):
    matches, totals = [], []
    for n in range(1, max_order + 1):
        c = _ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, k in _ngrams(r, n).items():
                if k > max_ref[g]:
                    max_ref[g] = k
        matches.append(sum(min(k, max_ref[g]) for g, k in c.items()))
        totals.append(max(len(cand) - n + 1, 0))
    return matches, totals


def _brevity(cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    return 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)


def sentence_bleu(cand: Tokens, refs: Sequence[Tokens], max_order: int = 4, smooth: bool = True) -> float:
    """Clipped n-gram BLEU for one candidate.

    With ``smooth``, an order >= 2 with no matches uses (0 + 1) / (total + 1);
    unigram precision is never smoothed, so token-disjoint pairs score 0.
    """
    if not refs:
        raise ContractError("bleu needs at least one reference")
    if len(cand) == 0:
        return 0.0
    matches, totals = _clipped_stats(cand, refs, max_order)
    logs = []
    for n, (m, t) in enumerate(zip(matches, totals), start=1):
        if m == 0:
            if not smooth or n == 1:
                return 0.0
            logs.append(math.log(1.0 / (t + 1.0)))
        else:
            logs.append(math.log(m / t))
    bp = _brevity(len(cand), _closest_ref_length(len(cand), refs))
    return bp * math.exp(sum(logs) / max_order)


def corpus_bleu(cands: Sequence[Tokens], refs_list: Sequence[Sequence[Tokens]], max_order: int = 4) -> float:
    """Unsmoothed corpus BLEU: n-gram counts and lengths pooled over the corpus."""
    if len(cands) != len(refs_list):
        raise ContractError(f"corpus_bleu: {len(cands)} candidates but {len(refs_list)} reference sets")
    match_tot = np.zeros(max_order)
    count_tot = np.zeros(max_order)
    c_len = r_len = 0
    for cand, refs in zip(cands, refs_list):
        m, t = _clipped_stats(cand, refs, max_order)
        match_tot += m
        count_tot += t
        c_len += len(cand)
        r_len += _closest_ref_length(len(cand), refs)
    if c_len == 0 or (match_tot == 0).any():
        return 0.0
    log_p = np.log(match_tot / count_tot).mean()
    return _brevity(c_len, r_len) * math.exp(log_p)


def bleu4(candidate, references, mode: str = "sentence_smoothed"):
    """BLEU-4.  ``mode`` is ``sentence_smoothed`` (one candidate) or ``corpus``
    (``candidate`` is a list of candidates and ``references`` a list of reference sets)."""
    if mode == "sentence_smoothed":
        return sentence_bleu(candidate, references, 4, smooth=True)
    if mode == "sentence":
        return sentence_bleu(candidate, references, 4, smooth=False)
    if mode == "corpus":
        return corpus_bleu(candidate, references, 4)
    raise ContractError(f"unknown bleu mode {mode!r}")


def _lcs(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, references: Sequence[Tokens], beta: float = 1.2) -> float:
    """LCS F-measure, best over references."""
    best = 0.0
    for ref in references:
        if not candidate or not ref:
            continue
        lcs = _lcs(candidate, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


def corpus_rouge_l(cands: Sequence[Tokens], refs_list: Sequence[Sequence[Tokens]]) -> float:
    return float(np.mean([rouge_l(c, r) for c, r in zip(cands, refs_list, strict=True)]))


def self_bleu(captions: Sequence[Tokens]) -> float:
    """Mean smoothed sentence BLEU-4 of each caption against the rest of the set."""
    if len(captions) < 2:
        raise ContractError(f"self_bleu needs at least 2 captions, got {len(captions)}")
    scores = []
    for i, cap in enumerate(captions):
        others = [c for j, c in enumerate(captions) if j != i]
        scores.append(sentence_bleu(cap, others, 4, smooth=True))
    return float(np.mean(scores))
