"""Per-seed training and evaluation runs behind the replication experiments.

These functions produce the raw metric rows; aggregation and pass/fail
judgement live in :mod:`midout.experiments`.  Only this module and the model
code feed the result-cache key.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import caption as cap
from .denoise import DenoiseConfig, eval_denoise, generate_denoise_dataset, train_denoise
from .rng import RngStream

log = logging.getLogger(__name__)

N_CONTROL_PAIRS = 200


@dataclass(frozen=True)
class Row:
    experiment: str
    model: str
    metric: str
    value: float
    seed: int


def denoise_rows(seed: int, config: DenoiseConfig) -> list[Row]:
    train, test = generate_denoise_dataset(config, RngStream(seed))
    rows = []
    for family in ("baseline", "middleout"):
        log.info("table1 seed %d: training %s", seed, family)
        res = train_denoise(family, config, train)
        total, sym = eval_denoise(res.model, test)
        early = next(v for s, v in res.losses if s >= min(100, config.steps))
        rows += [Row("table1", family, "mse", total, seed), Row("table1", family, "symmetric_mse", sym, seed),
                 Row("table1", family, "loss_early", early, seed),
                 Row("table1", family, "loss_final", res.losses[-1][1], seed)]
    return rows


def caption_rows(seed: int, config: cap.ToyCaptionConfig) -> list[Row]:
    """Train the four caption models for one seed and run every caption evaluation."""
    train, test = cap.generate_toy_dataset(config, RngStream(seed))
    clf = cap.train_classifier(config, train).model
    models = {
        "baseline": cap.train_caption("baseline", config, train).model,
        "middleout": cap.train_caption("middleout", config, train).model,
        "oracle_baseline": cap.train_oracle_baseline(config, train).model,
    }
    rows = []
    oracle = [s.verb_word for s in test]
    predicted = cap.classifier_words(clf, test)
    rows.append(Row("classifier", "classifier", "accuracy",
                    float(np.mean([p == o for p, o in zip(predicted, oracle)])), seed))
    evals = [("baseline", "baseline", None), ("middleout", "middleout", predicted),
             ("middleout_oracle", "middleout", oracle), ("oracle_baseline", "oracle_baseline", oracle)]
    for label, key, words in evals:
        res = cap.evaluate_captions(models[key], test, words, config.beam, config.max_len)
        rows += [Row("oracle", label, "bleu4", res["bleu4"], seed),
                 Row("oracle", label, "rouge_l", res["rouge_l"], seed)]
    sweep = cap.run_oracle_sweep(models["middleout"], clf, test, RngStream(seed).spawn(cap.hash_tag("sweep")),
                                 beam=config.beam, max_len=config.max_len)
    for row in sweep:
        rows += [Row("table3", f"middleout@{row.label}", "accuracy", row.accuracy, seed),
                 Row("table3", f"middleout@{row.label}", "bleu4", row.bleu4, seed),
                 Row("table3", f"middleout@{row.label}", "rouge_l", row.rouge_l, seed)]
    for label in ("baseline", "middleout"):
        div = cap.run_diversity_eval(models[label], test, clf, config.beam, config.max_len)
        rows += [Row("table4", label, "self_bleu", div.self_bleu, seed),
                 Row("table4", label, "distinct_verbs", div.distinct_verbs, seed)]
    pairs = cap.make_control_pairs(test, N_CONTROL_PAIRS, RngStream(seed).spawn(cap.hash_tag("control")))
    for label in ("middleout", "oracle_baseline"):
        rep = cap.control_targeting(models[label], pairs, config.beam, config.max_len)
        rows += [Row("control", label, "targeting", rep.targeting, seed),
                 Row("control", label, "contains_middle", rep.contains_middle, seed)]
    return rows

