"""Weighted synthetic grammars: corpus sampling, recognition, and minimal pairs.

Grammar files are plain text with four sections::

    NONTERMINALS
    S NP_sg NP_pl ...
    LEXICON
    hawk   N  sg  hawk
    hawks  N  pl  hawk
    RULES
    1.0  S  NP_sg VP_sg
    ...
    TEMPLATES
    simple_agreement   the N@1 IV!@1

Rule right-hand sides mix nonterminals, lexical slots, and literal words.  A
slot is ``CAT`` (any number) or ``CAT:sg`` / ``CAT:pl``.  Template tokens are
literal words or slots ``CAT@v`` bound to a number variable ``v``; a ``!``
(``CAT!@v``) marks the agreement-bearing token that gets flipped to its
opposite-number form in the ungrammatical member of each minimal pair.
Production weights are normalised per left-hand side at load time.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .trees import Tree

log = logging.getLogger(__name__)

NUMBERS = ("sg", "pl")


@dataclass(frozen=True)
class LexEntry:
    word: str
    category: str
    number: str  # "sg", "pl", or "-" for uninflected
    lemma: str


@dataclass(frozen=True)
class MinimalPair:
    construction: str
    grammatical: tuple
    ungrammatical: tuple


@dataclass(frozen=True)
class TemplateSlot:
    category: str
    var: str = None     # number variable name, or None for a free slot
    flip: bool = False  # token flipped in the ungrammatical member


class GrammarError(ValueError):
    pass


class WeightedGrammar:
    def __init__(self, nonterminals, lexicon, rules, templates,
                 start="S", preterminals=False):
        """rules: lhs -> list of (weight, rhs tuple); lexicon: list of LexEntry."""
        self.nonterminals = set(nonterminals)
        self.start = start
        self.preterminals = preterminals
        self.lexicon = list(lexicon)
        self.templates = dict(templates)

        self.by_category = {}
        self.by_cat_number = {}
        self.flip_map = {}
        words_seen = set()
        for entry in self.lexicon:
            if entry.word in words_seen:
                raise GrammarError(f"duplicate lexicon word {entry.word!r}")
            words_seen.add(entry.word)
            self.by_category.setdefault(entry.category, []).append(entry)
            self.by_cat_number.setdefault(
                (entry.category, entry.number), []).append(entry)
        for entry in self.lexicon:
            if entry.number in NUMBERS:
                other = "pl" if entry.number == "sg" else "sg"
                for cand in self.by_cat_number.get((entry.category, other), []):
                    if cand.lemma == entry.lemma:
                        self.flip_map[entry.word] = cand.word

        self.rules = {}
        for lhs, productions in rules.items():
            if lhs not in self.nonterminals:
                raise GrammarError(f"rule LHS {lhs!r} not declared nonterminal")
            total = sum(w for w, _ in productions)
            if total <= 0:
                raise GrammarError(f"non-positive total weight for {lhs!r}")
            self.rules[lhs] = [(w / total, tuple(rhs)) for w, rhs in productions]
        if self.start not in self.rules:
            raise GrammarError(f"no rules for start symbol {self.start!r}")

    # -- symbol classification --------------------------------------------

    def classify(self, symbol):
        """-> ("nt", lhs) | ("slot", (cat, number_or_None)) | ("word", word)."""
        if symbol in self.nonterminals:
            return ("nt", symbol)
        cat, sep, num = symbol.partition(":")
        if sep and cat in self.by_category:
            if num not in NUMBERS:
                raise GrammarError(f"bad number feature in {symbol!r}")
            return ("slot", (cat, num))
        if symbol in self.by_category:
            return ("slot", (symbol, None))
        return ("word", symbol)

    def slot_entries(self, cat, number):
        if number is None:
            entries = self.by_category.get(cat, [])
        else:
            entries = self.by_cat_number.get((cat, number), [])
        if not entries:
            raise GrammarError(f"no lexicon entries for {cat}:{number}")
        return entries

    def _leaf(self, entry):
        if self.preterminals:
            return Tree(entry.category, [Tree(entry.word)])
        return Tree(entry.word)

    # -- sampling ----------------------------------------------------------

    def sample_tree(self, rng, max_depth=20):
        """One top-down weighted expansion; None if the depth cutoff is hit."""

        def expand(symbol, depth):
            kind, info = self.classify(symbol)
            if kind == "word":
                return Tree(info)
            if kind == "slot":
                cat, number = info
                entries = self.slot_entries(cat, number)
                return self._leaf(entries[rng.integers(len(entries))])
            if depth >= max_depth:
                return None
            productions = self.rules.get(info)
            if not productions:
                raise GrammarError(f"nonterminal {info!r} has no rules")
            weights = np.array([w for w, _ in productions])
            idx = rng.choice(len(productions), p=weights / weights.sum())
            children = []
            for sym in productions[idx][1]:
                child = expand(sym, depth + 1)
                if child is None:
                    return None
                children.append(child)
            return Tree(info, children)

        return expand(self.start, 0)

    def sample_corpus(self, seed, n_sentences, max_depth=20,
                      max_rejections=10_000):
        """n i.i.d. trees; runaway derivations are rejected and resampled."""
        rng = np.random.default_rng(seed)
        out = []
        consecutive = 0
        while len(out) < n_sentences:
            tree = self.sample_tree(rng, max_depth=max_depth)
            if tree is None:
                consecutive += 1
                if consecutive > max_rejections:
                    raise GrammarError(
                        f"{max_rejections} consecutive depth rejections; "
                        "grammar likely non-terminating")
                continue
            consecutive = 0
            out.append(tree)
        return out

    # -- recognition -------------------------------------------------------

    def recognize(self, tokens, symbol=None):
        """True iff ``tokens`` is derivable from ``symbol`` (default: start).

        Memoised span recognition over arbitrary-length right-hand sides;
        meant for small instances (minimal-pair checks), not parsing at scale.
        """
        tokens = tuple(tokens)
        symbol = symbol or self.start
        memo = {}

        def derives(sym, i, j):
            key = (sym, i, j)
            if key in memo:
                return memo[key]
            memo[key] = False  # cycle guard: unary loops cannot extend a span
            kind, info = self.classify(sym)
            if kind == "word":
                result = j - i == 1 and tokens[i] == info
            elif kind == "slot":
                cat, number = info
                result = j - i == 1 and any(
                    e.word == tokens[i] for e in self.slot_entries(cat, number))
            else:
                result = any(seq_derives(rhs, i, j)
                             for _, rhs in self.rules.get(info, []))
            memo[key] = result
            return result

        def seq_derives(rhs, i, j):
            if not rhs:
                return i == j
            if len(rhs) == 1:
                return derives(rhs[0], i, j)
            head, rest = rhs[0], rhs[1:]
            return any(derives(head, i, k) and seq_derives(rest, k, j)
                       for k in range(i + 1, j - len(rest) + 1))

        return derives(symbol, 0, len(tokens))

    # -- minimal pairs -----------------------------------------------------

    def parse_template(self, pattern):
        slots = []
        for token in pattern:
            cat, sep, var = token.partition("@")
            flip = cat.endswith("!")
            if flip:
                cat = cat[:-1]
            if sep:
                if cat not in self.by_category:
                    raise GrammarError(f"template slot category {cat!r} unknown")
                slots.append(TemplateSlot(cat, var, flip))
            elif cat in self.by_category:
                slots.append(TemplateSlot(cat, None, flip))
            else:
                if flip:
                    raise GrammarError(f"cannot flip literal {token!r}")
                slots.append(token)  # literal word
        if not any(isinstance(s, TemplateSlot) and s.flip for s in slots):
            raise GrammarError("template has no flip-marked token")
        return slots

    def _flip(self, word):
        if word not in self.flip_map:
            raise GrammarError(f"no opposite-number counterpart for {word!r}")
        return self.flip_map[word]

    def generate_pairs(self, construction, seed, n):
        """Deduplicated minimal pairs for one construction template.

        Enumerates every (number-assignment, word-choice) combination, then
        returns a seeded random subset of ``n`` distinct pairs.
        """
        if construction not in self.templates:
            available = ", ".join(sorted(self.templates))
            raise GrammarError(
                f"unknown construction {construction!r}; available: {available}")
        slots = self.parse_template(self.templates[construction])
        variables = sorted({s.var for s in slots
                            if isinstance(s, TemplateSlot) and s.var})

        pairs = []
        seen = set()
        for assignment in itertools.product(NUMBERS, repeat=len(variables)):
            numbers = dict(zip(variables, assignment))
            choices = []
            for slot in slots:
                if isinstance(slot, TemplateSlot):
                    entries = self.slot_entries(slot.category,
                                                numbers.get(slot.var))
                    choices.append([e.word for e in entries])
                else:
                    choices.append([slot])
            for words in itertools.product(*choices):
                gram = tuple(words)
                ungram = tuple(
                    self._flip(w) if isinstance(s, TemplateSlot) and s.flip else w
                    for s, w in zip(slots, words))
                if gram == ungram:
                    continue
                if (gram, ungram) in seen:
                    continue
                seen.add((gram, ungram))
                pairs.append(MinimalPair(construction, gram, ungram))

        rng = np.random.default_rng(seed)
        order = rng.permutation(len(pairs))
        if n > len(pairs):
            warnings.warn(
                f"{construction}: requested {n} pairs, only {len(pairs)} distinct")
            n = len(pairs)
        return [pairs[i] for i in order[:n]]

    # -- serialisation -----------------------------------------------------

    def save(self, path):
        from .checkpoint import atomic_write

        def writer(fh):
            def w(line=""):
                fh.write((line + "\n").encode("utf-8"))

            if self.preterminals or self.start != "S":
                w("OPTIONS")
                w(f"start {self.start}")
                w(f"preterminals {'on' if self.preterminals else 'off'}")
            w("NONTERMINALS")
            w(" ".join(sorted(self.nonterminals)))
            w("LEXICON")
            for e in self.lexicon:
                w(f"{e.word} {e.category} {e.number} {e.lemma}")
            w("RULES")
            for lhs in sorted(self.rules):
                for weight, rhs in self.rules[lhs]:
                    w(f"{weight:.10g} {lhs} {' '.join(rhs)}")
            w("TEMPLATES")
            for tag in sorted(self.templates):
                w(f"{tag} {' '.join(self.templates[tag])}")

        atomic_write(path, writer)

    @staticmethod
    def load(path):
        sections = {"OPTIONS": [], "NONTERMINALS": [], "LEXICON": [],
                    "RULES": [], "TEMPLATES": []}
        current = None
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if line in sections:
                    current = line
                    continue
                if current is None:
                    raise GrammarError(f"line {lineno}: content before section header")
                sections[current].append((lineno, line))

        start, preterminals = "S", False
        for lineno, line in sections["OPTIONS"]:
            key, _, value = line.partition(" ")
            if key == "start":
                start = value.strip()
            elif key == "preterminals":
                preterminals = value.strip() in ("on", "true", "1")
            else:
                raise GrammarError(f"line {lineno}: unknown option {key!r}")

        nonterminals = []
        for _, line in sections["NONTERMINALS"]:
            nonterminals.extend(line.split())

        lexicon = []
        for lineno, line in sections["LEXICON"]:
            fields = line.split()
            if len(fields) not in (3, 4):
                raise GrammarError(f"line {lineno}: bad lexicon entry")
            word, cat, number = fields[:3]
            lemma = fields[3] if len(fields) == 4 else word
            if number not in NUMBERS + ("-",):
                raise GrammarError(f"line {lineno}: bad number {number!r}")
            lexicon.append(LexEntry(word, cat, number, lemma))

        rules = {}
        for lineno, line in sections["RULES"]:
            fields = line.split()
            if len(fields) < 3:
                raise GrammarError(f"line {lineno}: bad rule")
            try:
                weight = float(fields[0])
            except ValueError as exc:
                raise GrammarError(f"line {lineno}: bad weight") from exc
            rules.setdefault(fields[1], []).append((weight, tuple(fields[2:])))

        templates = {}
        for lineno, line in sections["TEMPLATES"]:
            fields = line.split()
            if len(fields) < 2:
                raise GrammarError(f"line {lineno}: bad template")
            templates[fields[0]] = tuple(fields[1:])

        return WeightedGrammar(nonterminals, lexicon, rules, templates,
                               start=start, preterminals=preterminals)


def agreement_grammar(preterminals=False, hard_weights=True):
    """Built-in English-like agreement grammar with ten evaluation constructions.

    ``hard_weights`` keeps relative clauses and coordination rarer in the
    sampled training distribution, so sequential models see fewer examples
    of the constructions with agreement attractors.
    """
    nouns = ["hawk", "farmer", "parent", "dog", "pilot", "teacher",
             "author", "chef", "senator", "surgeon", "manager", "guard"]
    iverbs = ["smiles", "swims", "laughs", "runs", "sleeps", "waits"]
    tverbs = ["loves", "admires", "sees", "knows"]
    sayverbs = ["says", "thinks"]

    def noun_forms(lemma):
        return [(lemma, "sg"), (lemma + "s", "pl")]

    def verb_forms(sg_form):
        return [(sg_form, "sg"), (sg_form[:-1], "pl")]

    lexicon = [LexEntry("the", "D", "-", "the"),
               LexEntry("near", "P", "-", "near"),
               LexEntry("behind", "P", "-", "behind"),
               LexEntry("that", "C", "-", "that"),
               LexEntry("and", "CONJ", "-", "and")]
    for lemma in nouns:
        for word, num in noun_forms(lemma):
            lexicon.append(LexEntry(word, "N", num, lemma))
    for sg in iverbs:
        for word, num in verb_forms(sg):
            lexicon.append(LexEntry(word, "IV", num, sg))
    for sg in tverbs:
        for word, num in verb_forms(sg):
            lexicon.append(LexEntry(word, "TV", num, sg))
    for sg in sayverbs:
        for word, num in verb_forms(sg):
            lexicon.append(LexEntry(word, "SAYV", num, sg))

    nonterminals = ["S"]
    rules = {"S": [(0.5, ("NP_sg", "VP_sg")), (0.5, ("NP_pl", "VP_pl"))]}

    # Relative clauses and coordination get lower sampling weight than plain
    # noun phrases when hard_weights is set.
    plain, modified = (0.58, 0.14) if hard_weights else (0.4, 0.2)
    for num in NUMBERS:
        np_n, vp_n = f"NP_{num}", f"VP_{num}"
        nonterminals += [np_n, vp_n, f"RC_{num}", f"RCNT_{num}", f"PP_{num}"]
        rules[np_n] = [
            (plain, ("D", f"N:{num}")),
            (modified, ("D", f"N:{num}", f"PP_{num}")),
            (modified, ("D", f"N:{num}", f"RC_{num}")),
            (modified, ("D", f"N:{num}", f"RCNT_{num}")),
        ]
        rules[f"PP_{num}"] = [
            (0.5, ("P", "D", "N:sg")),
            (0.5, ("P", "D", "N:pl")),
        ]
        # Subject relative: verb agrees with the head noun.  Object relative
        # (with and without complementiser): verb agrees with the embedded
        # subject.
        rules[f"RC_{num}"] = [
            (0.25, ("C", f"TV:{num}", "D", "N:sg")),
            (0.25, ("C", f"TV:{num}", "D", "N:pl")),
            (0.25, ("C", "D", "N:sg", "TV:sg")),
            (0.25, ("C", "D", "N:pl", "TV:pl")),
        ]
        rules[f"RCNT_{num}"] = [
            (0.5, ("D", "N:sg", "TV:sg")),
            (0.5, ("D", "N:pl", "TV:pl")),
        ]
        rules[vp_n] = [
            (0.34, (f"IV:{num}",)),
            (0.22, (f"TV:{num}", "D", "N:sg")),
            (0.22, (f"TV:{num}", "D", "N:pl")),
            (0.08, (f"IV:{num}", "and", f"IV:{num}")),
            (0.035, (f"TV:{num}", "D", "N:sg", "and", f"IV:{num}")),
            (0.035, (f"TV:{num}", "D", "N:pl", "and", f"IV:{num}")),
            (0.07, (f"SAYV:{num}", "that", "S")),
        ]

    templates = {
        "simple": ("the", "N@1", "IV!@1"),
        "in_sentential_complement":
            ("the", "N@2", "SAYV@2", "that", "the", "N@1", "IV!@1"),
        "short_vp_coordination": ("the", "N@1", "IV@1", "and", "IV!@1"),
        "long_vp_coordination":
            ("the", "N@1", "TV@1", "the", "N@2", "and", "IV!@1"),
        "across_pp": ("the", "N@1", "P", "the", "N@2", "IV!@1"),
        "across_subject_rc":
            ("the", "N@1", "that", "TV@1", "the", "N@2", "IV!@1"),
        "across_object_rc":
            ("the", "N@1", "that", "the", "N@2", "TV@2", "IV!@1"),
        "across_object_rc_no_that":
            ("the", "N@1", "the", "N@2", "TV@2", "IV!@1"),
        "in_object_rc":
            ("the", "N@1", "that", "the", "N@2", "TV!@2", "IV@1"),
        "in_object_rc_no_that":
            ("the", "N@1", "the", "N@2", "TV!@2", "IV@1"),
    }

    return WeightedGrammar(nonterminals, lexicon, rules, templates,
                           start="S", preterminals=preterminals)


def load_grammar(spec):
    """Load a grammar from a path or a ``builtin:<name>`` reference."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        options = set()
        if "+" in name:
            name, *opts = name.split("+")
            options = set(opts)
        if name != "agreement":
            raise GrammarError(f"unknown builtin grammar {name!r}")
        return agreement_grammar(preterminals="preterminals" in options)
    return WeightedGrammar.load(spec)
