"""``midout`` command line: gen-data, train, eval, generate, experiment.

Exit codes: 0 success, 1 usage or runtime error, 2 acceptance failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import caption as cap
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, read_config_file
from .decoding import MiddleOutModel, MiddleWordClassifier, Seq2SeqModel
from .denoise import DenoiseModel, eval_denoise, generate_denoise_dataset, read_dataset, train_denoise, write_dataset
from .experiments import EXPERIMENTS, HEADER, Row, StageError, render_table, run_experiment, write_rows
from .metrics import corpus_bleu, corpus_rouge_l
from .rng import RngStream
from .tensor import ContractError

log = logging.getLogger("midout")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration ------------------------------------------------------------

def _set_path(raw: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = raw
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config key {p!r} is not a section")
    node[leaf] = value


def resolve_config(args) -> RunConfig:
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for flag in ("task", "model", "seed"):
        val = getattr(args, flag, None)
        if val is not None:
            raw[flag] = val
    if getattr(args, "self_attention", None) is not None:
        raw["self_attention"] = args.self_attention
    for item in getattr(args, "set", None) or []:
        key, sep, text = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        _set_path(raw, key, value)
    try:
        return RunConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# -- data ---------------------------------------------------------------------

def generate_data(rc: RunConfig):
    if rc.task == "denoise":
        return generate_denoise_dataset(rc.denoise, RngStream(rc.seed))
    return cap.generate_toy_dataset(rc.caption, RngStream(rc.seed))


def write_data(rc: RunConfig, out: Path) -> tuple[Path, Path]:
    train, test = generate_data(rc)
    out.mkdir(parents=True, exist_ok=True)
    writer = write_dataset if rc.task == "denoise" else cap.write_corpus
    paths = out / "train.jsonl", out / "test.jsonl"
    writer(paths[0], train)
    writer(paths[1], test)
    return paths


def read_data(task: str, path: Path):
    if not path.exists():
        raise UsageError(f"data file not found: {path}")
    return read_dataset(path) if task == "denoise" else cap.read_corpus(path)


def load_split(rc: RunConfig, data_dir: str | None, split: str):
    if data_dir is None:
        train, test = generate_data(rc)
        return train if split == "train" else test
    return read_data(rc.task, Path(data_dir) / f"{split}.jsonl")


# -- models and checkpoints ---------------------------------------------------

def build_model(rc: RunConfig):
    if rc.task == "denoise":
        return DenoiseModel(rc.model, rc.denoise.hidden, rc.variant == "hidden", seed=rc.seed)
    c = rc.caption
    cls = MiddleOutModel if rc.model == "middleout" else Seq2SeqModel
    kwargs = {"oracle_input": rc.oracle_input} if rc.model == "baseline" else {}
    return cls(cap.caption_vocab(), c.feature_size, c.emb, c.hidden, rc.variant, seed=rc.seed, **kwargs)


def save_model(path: Path, model, rc: RunConfig, kind: str = "model", dtype: int = 0) -> None:
    save_checkpoint(path, model.store.state_dict(), {"kind": kind, "run": rc.to_dict(), "model": model.config()},
                    dtype)


def load_model(path: Path):
    arrays, blob = load_checkpoint(path)
    rc = RunConfig.from_dict(blob["run"])
    if blob.get("kind") == "classifier":
        m = blob["model"]
        model = MiddleWordClassifier(m["n_classes"], m["feature_size"], m["hidden_size"])
    else:
        model = build_model(rc)
    model.store.load_state_dict(arrays)
    return model, rc


def _classifier_for(args, checkpoint: Path):
    path = Path(args.classifier) if getattr(args, "classifier", None) else checkpoint.parent / "classifier.modc"
    if not path.exists():
        raise UsageError(f"middle-out captioning needs a classifier checkpoint ({path} not found)")
    return load_model(path)[0]


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    rc = resolve_config(args)
    try:
        paths = write_data(rc, Path(args.out))
    except OSError as exc:
        raise UsageError(f"cannot write {exc.filename}: {exc.strerror}") from None
    for p in paths:
        n = sum(1 for _ in p.open())
        print(f"wrote {n} samples to {p}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = load_split(rc, args.data, "train")
    losses: list[tuple[str, int, float]] = []
    if rc.task == "denoise":
        res = train_denoise(rc.model, rc.denoise, train, rc.variant == "hidden",
                            progress=lambda s, v: log.info("step %d loss %.6g", s, v))
        losses += [("step", s, v) for s, v in res.losses]
    else:
        res = cap.train_caption(rc.model, rc.caption, train, rc.variant, rc.oracle_input,
                                progress=lambda e, v: log.info("epoch %d loss %.6g", e, v))
        losses += [("epoch", e, v) for e, v in res.losses]
        if rc.model == "middleout":
            clf = cap.train_classifier(rc.caption, train).model
            save_model(out / "classifier.modc", clf, rc, kind="classifier", dtype=args.dtype)
    save_model(out / "model.modc", res.model, rc, dtype=args.dtype)
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "index", "loss"])
        for unit, i, v in losses:
            w.writerow([unit, i, repr(float(v))])
    print(f"wrote {out / 'model.modc'} and {out / 'losses.csv'}")
    return EXIT_OK


def evaluate_checkpoint(checkpoint: Path, data_dir: str | None, middle_source: str = "classifier",
                        classifier_path: str | None = None) -> list[Row]:
    model, rc = load_model(checkpoint)
    test = load_split(rc, data_dir, "test")
    if rc.task == "denoise":
        total, sym = eval_denoise(model, test)
        return [Row("eval", rc.model, "mse", total, rc.seed), Row("eval", rc.model, "symmetric_mse", sym, rc.seed)]
    c = rc.caption
    words = None
    clf = None
    if middle_source == "oracle" and (rc.model == "middleout" or rc.oracle_input):
        words = [s.verb_word for s in test]
    elif rc.model == "middleout":
        clf = _classifier_for(argparse.Namespace(classifier=classifier_path), checkpoint)
        words = cap.classifier_words(clf, test)
    elif rc.oracle_input:
        raise UsageError("an oracle-input baseline needs --middle-word-source oracle")
    cands = [cap.caption(model, s.features, words[i] if words else None, c.beam, c.max_len)
             for i, s in enumerate(test)]
    refs = [s.refs for s in test]
    label = rc.model + ("_oracle" if middle_source == "oracle" and words else "")
    return [Row("eval", label, "bleu4", corpus_bleu(cands, refs), rc.seed),
            Row("eval", label, "rouge_l", corpus_rouge_l(cands, refs), rc.seed)]


def cmd_eval(args) -> int:
    rows = evaluate_checkpoint(Path(args.checkpoint), args.data, args.middle_word_source, args.classifier)
    if args.out:
        write_rows(args.out, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(HEADER)
        for r in rows:
            w.writerow([r.experiment, r.model, r.metric, repr(float(r.value)), r.seed])
    return EXIT_OK


def cmd_generate(args) -> int:
    checkpoint = Path(args.checkpoint)
    model, rc = load_model(checkpoint)
    items = read_data(rc.task, Path(args.input))
    if not 0 <= args.index < len(items):
        raise UsageError(f"--index {args.index} out of range (input has {len(items)} items)")
    if rc.task == "denoise":
        pred = model.predict(items[args.index].x)[0]
        print(" ".join(f"{v:.6f}" for v in pred))
        return EXIT_OK
    feats = items[args.index].features
    if args.concat is not None:
        if not 0 <= args.concat < len(items):
            raise UsageError(f"--concat {args.concat} out of range")
        feats = np.concatenate([feats, items[args.concat].features], axis=0)
    if args.middle_word is not None and args.middle_word not in cap.VERBS:
        raise UsageError(f"middle word {args.middle_word!r} is not in the verb vocabulary")
    c = rc.caption
    beam = args.beam or c.beam
    if isinstance(model, MiddleOutModel):
        if args.middle_word is not None:
            hyps = model.beam_search(feats, [(model.vocab.stoi[args.middle_word], 0.0)], beam, c.max_len)
        else:
            clf = _classifier_for(args, checkpoint)
            seeds = [(model.vocab.stoi[cap.VERBS[k]], lp) for k, lp in clf.top_k(feats[None], beam)[0]]
            hyps = model.beam_search(feats, seeds, beam, c.max_len)
    else:
        middle = None
        if model.oracle_input:
            if args.middle_word is None:
                raise UsageError("an oracle-input baseline needs --middle-word")
            middle = model.vocab.stoi[args.middle_word]
        elif args.middle_word is not None:
            log.warning("the plain baseline ignores --middle-word")
        hyps = model.beam_search(feats, beam, middle, 2 * c.max_len)
    for h in hyps[:beam if args.nbest else 1]:
        text = " ".join(model.vocab.decode(h.tokens()))
        print(f"{h.score:.4f}\t{text}" if args.nbest else text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    result = run_experiment(args.name, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / f"{args.name}.csv", result.rows)
    print(render_table(result.rows))
    for c in result.checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {args.name}: {c.name} ({c.detail})")
    print(f"verdict: {'PASS' if result.passed else 'FAIL'}")
    return EXIT_OK if result.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="midout", description="Middle-out decoding with dual self-attention.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--task", choices=("denoise", "caption"))
        sp.add_argument("--model", choices=("baseline", "middleout"))
        sp.add_argument("--self-attention", dest="self_attention", choices=("none", "output", "hidden", "dual"))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. denoise.steps=200 (repeatable)")

    g = sub.add_parser("gen-data", help="write train.jsonl and test.jsonl")
    config_flags(g)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    config_flags(t)
    t.add_argument("--data", help="directory with train.jsonl (generated from the config when omitted)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--dtype", type=int, choices=(0, 1), default=0, help="checkpoint payload: 0 f64, 1 f32")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on test.jsonl")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="directory with test.jsonl (regenerated from the checkpoint config when omitted)")
    e.add_argument("--out", help="metrics CSV (stdout when omitted)")
    e.add_argument("--middle-word-source", choices=("classifier", "oracle"), default="classifier")
    e.add_argument("--classifier", help="classifier checkpoint (default: classifier.modc next to the model)")
    e.set_defaults(func=cmd_eval)

    gen = sub.add_parser("generate", help="decode one input")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--input", required=True, help="JSON-lines corpus file")
    gen.add_argument("--index", type=int, default=0)
    gen.add_argument("--concat", type=int, help="append the frames of this item (control mode)")
    gen.add_argument("--middle-word", help="seed word for middle-out or oracle-input decoding")
    gen.add_argument("--beam", type=int, help="beam size (default from the config)")
    gen.add_argument("--nbest", action="store_true", help="print every beam output with its score")
    gen.add_argument("--classifier")
    gen.set_defaults(func=cmd_generate)

    x = sub.add_parser("experiment", help="run a replication experiment over 3 seeds")
    x.add_argument("name", choices=EXPERIMENTS)
    x.add_argument("--seed", type=int, default=0, help="base seed (runs base, base+1, base+2)")
    x.add_argument("--out", default="results")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
