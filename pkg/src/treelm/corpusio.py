"""File formats: plain corpora, treebanks, and minimal-pair TSVs."""

from __future__ import annotations

from .checkpoint import atomic_write
from .grammar import MinimalPair
from .trees import parse_bracketed, print_bracketed


def read_corpus(path):
    """One tokenized sentence per line, space-separated."""
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tokens = line.split()
            if tokens:
                sentences.append(tokens)
    return sentences


def write_corpus(path, sentences):
    atomic_write(path, lambda fh: fh.writelines(
        (" ".join(s) + "\n").encode("utf-8") for s in sentences))


def read_treebank(path):
    """One bracketed tree per line; also the ingestion point for external parses."""
    trees = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                trees.append(parse_bracketed(line))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return trees


def write_treebank(path, trees):
    atomic_write(path, lambda fh: fh.writelines(
        (print_bracketed(t) + "\n").encode("utf-8") for t in trees))


def read_pairs(path):
    """TSV: construction, grammatical sentence, ungrammatical sentence."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            pairs.append(MinimalPair(fields[0],
                                     tuple(fields[1].split()),
                                     tuple(fields[2].split())))
    return pairs


def write_pairs(path, pairs):
    atomic_write(path, lambda fh: fh.writelines(
        "\t".join([p.construction,
                   " ".join(p.grammatical),
                   " ".join(p.ungrammatical)]).encode("utf-8") + b"\n"
        for p in pairs))
