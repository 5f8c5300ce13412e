"""Targeted syntactic evaluation: per-pair scoring, suite accuracy tables,
and multi-seed aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import atomic_write
from .inference import BeamConfig, marginal_lower_bound
from .rnng import Limits


class LstmScorer:
    """log q(sentence) including the EOS event; pure and deterministic."""

    def __init__(self, model, model_id="lstm"):
        self.model = model
        self.model_id = model_id

    def score(self, tokens):
        return -self.model.sentence_nll(list(tokens))


class RnngBeamScorer:
    """Marginal lower bound under word-synchronised beam search; EOS is the
    final synchronised word.  Beam failure returns None."""

    def __init__(self, model, config=None, limits=Limits(), model_id="rnng"):
        self.model = model
        self.config = config or BeamConfig()
        self.limits = limits
        self.model_id = model_id

    def score(self, tokens):
        eos = self.model.vocab.decode(self.model.vocab.eos_id)
        bound = marginal_lower_bound(self.model, list(tokens) + [eos],
                                     self.config, self.limits)
        return None if bound == -math.inf else bound


@dataclass
class ConstructionResult:
    count: int = 0
    successes: int = 0
    failures_scoring: int = 0  # beam/scoring failures, counted as misses

    @property
    def accuracy(self):
        return self.successes / self.count if self.count else 0.0


@dataclass
class SuiteResult:
    model_id: str
    seed: int
    constructions: dict = field(default_factory=dict)

    @property
    def aggregate(self):
        """Unweighted mean over constructions (not pair-weighted)."""
        if not self.constructions:
            raise ValueError("empty suite result")
        return sum(c.accuracy for c in self.constructions.values()) \
            / len(self.constructions)


def evaluate_pair(scorer, pair):
    """Success iff the grammatical member scores strictly higher.

    Exact ties and scoring failures count as failure; returns
    (success, scoring_failed).
    """
    good = scorer.score(pair.grammatical)
    bad = scorer.score(pair.ungrammatical)
    if good is None or bad is None:
        return False, True
    return good > bad, False


def run_suite(scorer, pairs, seed=0):
    if not pairs:
        raise ValueError("empty pair suite")
    result = SuiteResult(scorer.model_id, seed)
    for pair in pairs:
        success, failed = evaluate_pair(scorer, pair)
        entry = result.constructions.setdefault(pair.construction,
                                                ConstructionResult())
        entry.count += 1
        entry.successes += int(success)
        entry.failures_scoring += int(failed)
    return result


def aggregate_results(results):
    """Mean and population stdev per construction and in aggregate, across
    identically-configured runs (different seeds)."""
    if not results:
        raise ValueError("no results to aggregate")
    tags = sorted(results[0].constructions)
    for r in results[1:]:
        if sorted(r.constructions) != tags:
            missing = set(tags).symmetric_difference(r.constructions)
            raise ValueError(f"inconsistent construction sets: {sorted(missing)}")
    table = {}
    for tag in tags:
        accs = np.array([r.constructions[tag].accuracy for r in results])
        table[tag] = (float(accs.mean()), float(accs.std()))
    aggs = np.array([r.aggregate for r in results])
    return table, (float(aggs.mean()), float(aggs.std()))


def write_suite_tsv(path, result):
    def writer(fh):
        fh.write(b"construction\tn\taccuracy\tscoring_failures\n")
        for tag in sorted(result.constructions):
            c = result.constructions[tag]
            fh.write(f"{tag}\t{c.count}\t{c.accuracy:.6f}\t"
                     f"{c.failures_scoring}\n".encode())
        fh.write(f"AGGREGATE\t{sum(c.count for c in result.constructions.values())}"
                 f"\t{result.aggregate:.6f}\t0\n".encode())

    atomic_write(path, writer)


def read_suite_tsv(path, model_id="", seed=0):
    result = SuiteResult(model_id, seed)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("construction\t"):
            raise ValueError(f"{path}: not a suite result TSV")
        for line in fh:
            tag, n, acc, failures = line.rstrip("\n").split("\t")
            if tag == "AGGREGATE":
                continue
            entry = ConstructionResult(int(n), round(float(acc) * int(n)),
                                       int(failures))
            result.constructions[tag] = entry
    return result
