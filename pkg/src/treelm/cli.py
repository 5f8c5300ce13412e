"""Experiment driver: subcommands over the library with plain key=value
config files, resolved-config snapshots next to every artifact, and seeded
determinism throughout."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from collections import Counter

import numpy as np

from . import corpusio, report
from .checkpoint import atomic_write
from .distill import (DistillConfig, TeacherCache, build_cache,
                      corpus_fingerprint, train_distilled)
from .evalsuite import LstmScorer, RnngBeamScorer, run_suite, write_suite_tsv
from .grammar import load_grammar
from .inference import BeamConfig, beam_decode
from .lstm import (LstmLmModel, TrainConfig, perplexity, train_lm,
                   write_train_log)
from .probe import (build_dataset, majority_share, probe_accuracy,
                    shuffled_labels, train_probe)
from .rnng import Limits, RnngConfig, load_rnng, save_rnng, train_rnng
from .trees import print_bracketed
from .vocab import Vocabulary, build_vocab

log = logging.getLogger("treelm.cli")


class Opt:
    """One resolvable option: CLI flag > config-file key > default."""

    def __init__(self, flag, key, type=str, default=None, required=False,
                 help=None, choices=None):
        self.flag = flag
        self.key = key
        self.type = type
        self.default = default
        self.required = required
        self.help = help
        self.choices = choices
        self.dest = flag.lstrip("-").replace("-", "_")


def _parse_bool(text):
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config_file(path):
    """Plain ``key = value`` lines; '#' comments and blank lines allowed."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ValueError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def resolve_options(args, options):
    """Merge CLI flags over the config file over defaults.

    Unknown config keys are rejected; returns (values dict by dest,
    snapshot dict by config key).
    """
    config = {}
    if getattr(args, "config", None):
        config = parse_config_file(args.config)
        known = {opt.key for opt in options}
        unknown = sorted(set(config) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    values, snapshot = {}, {}
    for opt in options:
        value = getattr(args, opt.dest)
        if value is None and opt.key in config:
            raw = config[opt.key]
            value = _parse_bool(raw) if opt.type is bool else opt.type(raw)
        if value is None:
            value = opt.default
        if value is None and opt.required:
            raise ValueError(f"missing required option {opt.flag} "
                             f"(config key {opt.key})")
        if opt.choices and value is not None and value not in opt.choices:
            raise ValueError(f"{opt.flag}: {value!r} not in {opt.choices}")
        values[opt.dest] = value
        if value is not None:
            snapshot[opt.key] = value
    return values, snapshot


def write_snapshot(artifact_path, snapshot):
    """Resolved-config snapshot next to the artifact (<path>.config)."""
    def writer(fh):
        for key in sorted(snapshot):
            value = snapshot[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{key} = {value}\n".encode("utf-8"))

    atomic_write(str(artifact_path) + ".config", writer)


def load_or_build_vocab(path, sentences, min_count):
    """Load the vocabulary artifact, or build and persist it if absent."""
    import os
    if os.path.exists(path):
        return Vocabulary.load(path)
    vocab = build_vocab(sentences, min_count=min_count)
    vocab.save(path)
    log.info("built vocabulary of %d types at %s", len(vocab), path)
    return vocab


def select_teacher_subset(trees, fraction, seed):
    """First ``fraction`` of a seeded shuffle, then greedy swap-ins until
    every word type of the full treebank occurs at least once."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"subset fraction must be in (0,1], got {fraction}")
    n = len(trees)
    k = max(1, math.ceil(fraction * n))
    order = list(np.random.default_rng(seed).permutation(n))
    chosen, rest = order[:k], order[k:]

    def types(i):
        return set(trees[i].leaves())

    all_types = set().union(*(types(i) for i in range(n)))
    covered = Counter()
    for i in chosen:
        covered.update(types(i))
    while True:
        missing = sorted(t for t in all_types if covered[t] == 0)
        if not missing:
            break
        incoming = next(i for i in rest if missing[0] in types(i))
        victim = next((i for i in chosen
                       if all(covered[w] > 1 for w in types(i))), None)
        if victim is not None:
            chosen.remove(victim)
            covered.subtract(types(victim))
        rest.remove(incoming)
        chosen.append(incoming)
        covered.update(types(incoming))
    return [trees[i] for i in sorted(chosen)]


# -- subcommands -------------------------------------------------------------

def cmd_gen_corpus(args, options):
    values, snapshot = resolve_options(args, options)
    grammar = load_grammar(values["grammar"])
    trees = grammar.sample_corpus(seed=values["seed"],
                                  n_sentences=values["n"])
    corpusio.write_treebank(values["out"], trees)
    write_snapshot(values["out"], snapshot)
    if values["corpus_out"]:
        corpusio.write_corpus(values["corpus_out"],
                              [t.leaves() for t in trees])
    if values["vocab_out"]:
        vocab = build_vocab([t.leaves() for t in trees],
                            min_count=values["min_count"])
        vocab.save(values["vocab_out"])
    log.info("wrote %d trees to %s", len(trees), values["out"])
    return 0


def cmd_gen_pairs(args, options):
    values, snapshot = resolve_options(args, options)
    grammar = load_grammar(values["grammar"])
    tags = (sorted(grammar.templates) if values["construction"] == "all"
            else [values["construction"]])
    pairs = []
    for tag in tags:
        pairs.extend(grammar.generate_pairs(tag, seed=values["seed"],
                                            n=values["n"]))
    corpusio.write_pairs(values["out"], pairs)
    write_snapshot(values["out"], snapshot)
    log.info("wrote %d pairs (%d constructions) to %s",
             len(pairs), len(tags), values["out"])
    return 0


def _train_config(values):
    return TrainConfig(hidden_size=values["hidden"],
                       embed_size=values["embed"],
                       lr=values["lr"], decay=values["decay"],
                       decay_start_epoch=values["decay_start"],
                       dropout=values["dropout"],
                       batch_size=values["batch_size"],
                       max_epochs=values["epochs"], seed=values["seed"])


def _progress(tag):
    def show(row):
        log.info("%s %s", tag, row)
    return show


def cmd_train_lstm(args, options):
    values, snapshot = resolve_options(args, options)
    train = corpusio.read_corpus(values["train"])
    valid = corpusio.read_corpus(values["valid"])
    vocab = load_or_build_vocab(values["vocab"], train, values["min_count"])
    config = _train_config(values)
    model, logs = train_lm(config, train, valid, vocab,
                           progress=_progress("train-lstm"))
    model.save(values["out"])
    write_snapshot(values["out"], snapshot)
    if values["log"]:
        write_train_log(values["log"], logs)
    log.info("best valid ppl %.3f", min(row.valid_ppl for row in logs))
    return 0


def cmd_train_rnng(args, options):
    values, snapshot = resolve_options(args, options)
    train = corpusio.read_treebank(values["train"])
    valid = corpusio.read_treebank(values["valid"])
    vocab = load_or_build_vocab(values["vocab"],
                                [t.leaves() for t in train],
                                values["min_count"])
    if values["subset_fraction"] < 1.0:
        train = select_teacher_subset(train, values["subset_fraction"],
                                      values["seed"])
        log.info("teacher subset: %d trees", len(train))
    labels = sorted({lab for t in train for lab in _nt_labels(t)})
    config = RnngConfig(hidden_size=values["hidden"], lr=values["lr"],
                        decay=values["decay"],
                        decay_start_epoch=values["decay_start"],
                        dropout=values["dropout"],
                        batch_size=values["batch_size"],
                        max_epochs=values["epochs"], seed=values["seed"])
    limits = Limits(values["max_open"], values["max_length"])
    model, logs = train_rnng(config, train, valid, vocab, labels, limits,
                             progress=_progress("train-rnng"))
    save_rnng(model, values["out"])
    write_snapshot(values["out"], snapshot)
    if values["log"]:
        def writer(fh):
            fh.write(b"epoch\ttrain_nll\tvalid_nll\tlr\n")
            for epoch, train_nll, valid_nll, lr in logs:
                fh.write(f"{epoch}\t{train_nll:.6f}\t{valid_nll:.6f}\t"
                         f"{lr:.6g}\n".encode())
        atomic_write(values["log"], writer)
    log.info("best valid joint nll %.4f", min(row[2] for row in logs))
    return 0


def _nt_labels(tree):
    if tree.is_leaf:
        return
    yield tree.label
    for child in tree.children:
        yield from _nt_labels(child)


def cmd_cache_teacher(args, options):
    values, snapshot = resolve_options(args, options)
    vocab = Vocabulary.load(values["vocab"])
    teacher = load_rnng(values["teacher"], vocab)
    trees = corpusio.read_treebank(values["treebank"])
    limits = Limits(values["max_open"], values["max_length"])
    build_cache(teacher, trees, path=values["out"], limits=limits,
                check_fraction=values["check_fraction"], seed=values["seed"])
    write_snapshot(values["out"], snapshot)
    log.info("cached teacher states for %d sentences", len(trees))
    return 0


def cmd_train_distill(args, options):
    values, snapshot = resolve_options(args, options)
    trees = corpusio.read_treebank(values["train"])
    sentences = [t.leaves() for t in trees]
    valid = corpusio.read_corpus(values["valid"])
    vocab = Vocabulary.load(values["vocab"])
    config = DistillConfig(alpha=values["alpha"],
                           teacher_kind=values["teacher_kind"],
                           student=_train_config(values),
                           sample_count=values["sample_count"])
    limits = Limits(values["max_open"], values["max_length"])
    cache = teacher_lstm = teacher_rnng = None
    fingerprint = None
    if config.teacher_kind == "rnng-cache" and config.alpha > 0.0:
        if not values["cache"]:
            raise ValueError("rnng-cache mode needs --cache")
        cache = TeacherCache.load(values["cache"], vocab)
        fingerprint = corpus_fingerprint(trees)
    elif config.teacher_kind == "lstm":
        if not values["teacher_lstm"]:
            raise ValueError("lstm mode needs --teacher-lstm")
        teacher_lstm = LstmLmModel.load(values["teacher_lstm"], vocab)
    elif config.teacher_kind == "mc-samples":
        if not values["teacher_rnng"]:
            raise ValueError("mc-samples mode needs --teacher-rnng")
        teacher_rnng = load_rnng(values["teacher_rnng"], vocab)
    model, logs = train_distilled(config, sentences, valid, vocab,
                                  cache=cache, teacher_lstm=teacher_lstm,
                                  teacher_rnng=teacher_rnng,
                                  expected_fingerprint=fingerprint,
                                  limits=limits,
                                  progress=_progress("train-distill"))
    model.save(values["out"])
    write_snapshot(values["out"], snapshot)
    if values["log"]:
        write_train_log(values["log"], logs)
    log.info("best valid ppl %.3f", min(row.valid_ppl for row in logs))
    return 0


def cmd_decode(args, options):
    values, snapshot = resolve_options(args, options)
    vocab = Vocabulary.load(values["vocab"])
    model = load_rnng(values["model"], vocab)
    sentences = corpusio.read_corpus(values["input"])
    config = BeamConfig(values["word_beam"], values["action_beam"],
                        values["fast_track"])
    limits = Limits(values["max_open"], values["max_length"])
    eos = vocab.decode(vocab.eos_id)

    def writer(fh):
        fh.write(b"sentence\trank\tjoint_logprob\ttree\n")
        for idx, tokens in enumerate(sentences):
            results = beam_decode(model, tokens + [eos], config, limits)
            if not results:
                log.warning("beam failure on sentence %d", idx)
            for rank, (tree, logprob) in enumerate(results):
                fh.write(f"{idx}\t{rank}\t{logprob:.6f}\t"
                         f"{print_bracketed(tree)}\n".encode())

    atomic_write(values["out"], writer)
    write_snapshot(values["out"], snapshot)
    return 0


def cmd_ppl(args, options):
    values, snapshot = resolve_options(args, options)
    vocab = Vocabulary.load(values["vocab"])
    model = LstmLmModel.load(values["model"], vocab)
    corpus = corpusio.read_corpus(values["corpus"])
    value = perplexity(model, corpus)
    n_tokens = sum(len(s) + 1 for s in corpus)

    def writer(fh):
        fh.write(b"n_sentences\tn_tokens\tppl\n")
        fh.write(f"{len(corpus)}\t{n_tokens}\t{value:.6f}\n".encode())

    atomic_write(values["out"], writer)
    write_snapshot(values["out"], snapshot)
    log.info("perplexity %.3f over %d tokens", value, n_tokens)
    return 0


def cmd_eval_suite(args, options):
    values, snapshot = resolve_options(args, options)
    vocab = Vocabulary.load(values["vocab"])
    pairs = corpusio.read_pairs(values["pairs"])
    limits = Limits(values["max_open"], values["max_length"])
    if values["scorer"] == "lstm":
        model = LstmLmModel.load(values["model"], vocab)
        scorer = LstmScorer(model, model_id=values["model_id"])
    else:
        model = load_rnng(values["model"], vocab)
        config = BeamConfig(values["word_beam"], values["action_beam"],
                            values["fast_track"])
        scorer = RnngBeamScorer(model, config, limits,
                                model_id=values["model_id"])
    result = run_suite(scorer, pairs, seed=values["seed"])
    write_suite_tsv(values["out"], result)
    write_snapshot(values["out"], snapshot)
    log.info("aggregate accuracy %.4f over %d constructions",
             result.aggregate, len(result.constructions))
    return 0


def cmd_probe(args, options):
    values, snapshot = resolve_options(args, options)
    vocab = Vocabulary.load(values["vocab"])
    model = LstmLmModel.load(values["model"], vocab)
    trees = corpusio.read_treebank(values["treebank"])
    sizes = tuple(int(x) for x in values["split_sizes"].split(","))
    if len(sizes) != 3:
        raise ValueError("--split-sizes needs three comma-separated counts")
    dataset = build_dataset(model, trees, split_sizes=sizes)
    weights = train_probe(dataset)
    test_acc = probe_accuracy(weights, dataset.features["test"],
                              dataset.labels["test"])
    control = shuffled_labels(dataset, seed=values["seed"])
    control_acc = probe_accuracy(train_probe(control),
                                 control.features["test"],
                                 control.labels["test"])
    majority = majority_share(dataset.labels["train"])

    def writer(fh):
        fh.write(b"metric\tvalue\n")
        fh.write(f"test_accuracy\t{test_acc:.6f}\n".encode())
        fh.write(f"control_accuracy\t{control_acc:.6f}\n".encode())
        fh.write(f"majority_share\t{majority:.6f}\n".encode())
        fh.write(f"n_train\t{len(dataset.labels['train'])}\n".encode())
        fh.write(f"n_test\t{len(dataset.labels['test'])}\n".encode())
        fh.write(b"feature_layer\ttop\n")

    atomic_write(values["out"], writer)
    write_snapshot(values["out"], snapshot)
    log.info("probe test accuracy %.4f (majority %.4f, control %.4f)",
             test_acc, majority, control_acc)
    return 0


def cmd_report(args, options):
    values, snapshot = resolve_options(args, options)
    written = report.write_report(values["results"], values["out"],
                                  figures=not values["no_figures"])
    write_snapshot(values["out"] + ".md", snapshot)
    for path in written:
        log.info("wrote %s", path)
    return 0


# -- wiring ------------------------------------------------------------------

def _hyper_options(lr, decay, decay_start, dropout, batch):
    return [
        Opt("--hidden", "train.hidden_size", int, 128),
        Opt("--embed", "train.embed_size", int, 128),
        Opt("--lr", "train.lr", float, lr),
        Opt("--decay", "train.decay", float, decay),
        Opt("--decay-start", "train.decay_start_epoch", int, decay_start),
        Opt("--dropout", "train.dropout", float, dropout),
        Opt("--batch-size", "train.batch_size", int, batch),
        Opt("--epochs", "train.max_epochs", int, 40),
    ]


_LIMIT_OPTIONS = [
    Opt("--max-open", "rnng.max_open_nts", int, 40),
    Opt("--max-length", "rnng.max_length", int, 120),
]

_BEAM_OPTIONS = [
    Opt("--word-beam", "beam.word_beam", int, 10),
    Opt("--action-beam", "beam.action_beam", int, 100),
    Opt("--fast-track", "beam.fast_track", int),
]

SUBCOMMANDS = {
    "gen-corpus": (cmd_gen_corpus, "Sample a treebank from a grammar", [
        Opt("--grammar", "corpus.grammar", str, required=True,
            help="grammar file or builtin:agreement[+preterminals]"),
        Opt("--n", "corpus.n_sentences", int, required=True),
        Opt("--seed", "corpus.seed", int, 0),
        Opt("--out", "corpus.out", str, required=True,
            help="output treebank (bracketed, one per line)"),
        Opt("--corpus-out", "corpus.strings_out", str,
            help="also write surface strings"),
        Opt("--vocab-out", "corpus.vocab_out", str),
        Opt("--min-count", "corpus.min_count", int, 1),
    ]),
    "gen-pairs": (cmd_gen_pairs, "Generate minimal pairs from a grammar", [
        Opt("--grammar", "pairs.grammar", str, required=True),
        Opt("--construction", "pairs.construction", str, "all"),
        Opt("--n", "pairs.n_per_construction", int, required=True),
        Opt("--seed", "pairs.seed", int, 0),
        Opt("--out", "pairs.out", str, required=True),
    ]),
    "train-lstm": (cmd_train_lstm, "Train a plain LSTM language model", [
        Opt("--train", "lstm.train_corpus", str, required=True),
        Opt("--valid", "lstm.valid_corpus", str, required=True),
        Opt("--vocab", "lstm.vocab", str, required=True,
            help="vocabulary file; built from the training corpus if absent"),
        Opt("--min-count", "lstm.min_count", int, 1),
        Opt("--seed", "lstm.seed", int, 0),
        Opt("--out", "lstm.out", str, required=True),
        Opt("--log", "lstm.log", str),
    ] + _hyper_options(0.45, 0.9, 10, 0.2, 20)),
    "train-rnng": (cmd_train_rnng, "Train the joint tree model", [
        Opt("--train", "rnng.train_treebank", str, required=True),
        Opt("--valid", "rnng.valid_treebank", str, required=True),
        Opt("--vocab", "rnng.vocab", str, required=True),
        Opt("--min-count", "rnng.min_count", int, 1),
        Opt("--subset-fraction", "rnng.subset_fraction", float, 1.0,
            help="train on this seeded-shuffle fraction, keeping all word types"),
        Opt("--seed", "rnng.seed", int, 0),
        Opt("--out", "rnng.out", str, required=True),
        Opt("--log", "rnng.log", str),
    ] + _hyper_options(0.3, 0.92, 10, 0.3, 10) + _LIMIT_OPTIONS),
    "cache-teacher": (cmd_cache_teacher,
                      "Precompute teacher hidden states for a treebank", [
        Opt("--teacher", "cache.teacher", str, required=True),
        Opt("--treebank", "cache.treebank", str, required=True),
        Opt("--vocab", "cache.vocab", str, required=True),
        Opt("--check-fraction", "cache.check_fraction", float, 0.01),
        Opt("--seed", "cache.seed", int, 0),
        Opt("--out", "cache.out", str, required=True),
    ] + _LIMIT_OPTIONS),
    "train-distill": (cmd_train_distill,
                      "Train a student LSTM with the interpolated objective", [
        Opt("--train", "distill.train_treebank", str, required=True),
        Opt("--valid", "distill.valid_corpus", str, required=True),
        Opt("--vocab", "distill.vocab", str, required=True),
        Opt("--alpha", "distill.alpha", float, 0.5),
        Opt("--teacher-kind", "distill.teacher_kind", str, "rnng-cache",
            choices=("rnng-cache", "lstm", "mc-samples")),
        Opt("--cache", "distill.cache", str),
        Opt("--teacher-lstm", "distill.teacher_lstm", str),
        Opt("--teacher-rnng", "distill.teacher_rnng", str),
        Opt("--sample-count", "distill.sample_count", int, 1000),
        Opt("--seed", "distill.seed", int, 0),
        Opt("--out", "distill.out", str, required=True),
        Opt("--log", "distill.log", str),
    ] + _hyper_options(0.45, 0.9, 10, 0.2, 20) + _LIMIT_OPTIONS),
    "decode": (cmd_decode, "Beam-decode parses for a corpus", [
        Opt("--model", "decode.model", str, required=True),
        Opt("--vocab", "decode.vocab", str, required=True),
        Opt("--input", "decode.corpus", str, required=True),
        Opt("--seed", "decode.seed", int, 0),
        Opt("--out", "decode.out", str, required=True),
    ] + _BEAM_OPTIONS + _LIMIT_OPTIONS),
    "ppl": (cmd_ppl, "Perplexity of an LSTM checkpoint on a corpus", [
        Opt("--model", "ppl.model", str, required=True),
        Opt("--vocab", "ppl.vocab", str, required=True),
        Opt("--corpus", "ppl.corpus", str, required=True),
        Opt("--seed", "ppl.seed", int, 0),
        Opt("--out", "ppl.out", str, required=True),
    ]),
    "eval-suite": (cmd_eval_suite, "Score minimal pairs with a model", [
        Opt("--model", "eval.model", str, required=True),
        Opt("--scorer", "eval.scorer", str, required=True,
            choices=("lstm", "rnng-beam")),
        Opt("--model-id", "eval.model_id", str, "model"),
        Opt("--vocab", "eval.vocab", str, required=True),
        Opt("--pairs", "eval.pairs", str, required=True),
        Opt("--seed", "eval.seed", int, 0),
        Opt("--out", "eval.out", str, required=True),
    ] + _BEAM_OPTIONS + _LIMIT_OPTIONS),
    "probe": (cmd_probe, "Grandparent-label probe on frozen LSTM features", [
        Opt("--model", "probe.model", str, required=True),
        Opt("--vocab", "probe.vocab", str, required=True),
        Opt("--treebank", "probe.treebank", str, required=True),
        Opt("--split-sizes", "probe.split_sizes", str, "30000,3000,3000"),
        Opt("--seed", "probe.seed", int, 0),
        Opt("--out", "probe.out", str, required=True),
    ]),
    "report": (cmd_report, "Comparison table and figures from results", [
        Opt("--results", "report.results_dir", str, required=True),
        Opt("--out", "report.out_prefix", str, required=True),
        Opt("--no-figures", "report.no_figures", bool, False),
        Opt("--seed", "report.seed", int, 0),
    ]),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="treelm",
        description="Syntactic distillation toolkit: hierarchical teacher, "
                    "sequential student, targeted evaluation.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, (func, help_text, options) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="key = value config file")
        p.add_argument("--jobs", type=int, default=1,
                       help="accepted for interface compatibility; "
                            "stages run serially for determinism")
        for opt in options:
            if opt.type is bool:
                p.add_argument(opt.flag, dest=opt.dest, action="store_const",
                               const=True, default=None, help=opt.help)
            else:
                p.add_argument(opt.flag, dest=opt.dest, type=opt.type,
                               default=None, help=opt.help)
        p.set_defaults(func=func, options=options)
    return parser


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, args.options)
    except Exception as exc:  # runtime failure: exit 1, module-qualified
        module = type(exc).__module__
        name = type(exc).__name__
        qualified = name if module == "builtins" else f"{module}.{name}"
        print(f"treelm {args.subcommand}: {qualified}: {exc}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
