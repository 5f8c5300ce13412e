"""Incremental decoding for the RNNG: word-synchronised beam search with
fast-tracking, the marginal-probability lower bound, exact enumeration
oracles, and ancestral joint sampling.

All functions take the complete terminal sequence to be modelled; callers
that follow the sentence convention append the EOS terminal themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .rnng import A_GEN, A_NT, A_REDUCE, Limits
from .trees import GEN, NT, REDUCE, Action


class EnumerationBudgetExceeded(RuntimeError):
    pass


@dataclass
class BeamConfig:
    word_beam: int = 10       # k_w
    action_beam: int = 100    # k_a
    fast_track: int = None    # s; defaults to ceil(k_w / 10)

    def __post_init__(self):
        if self.fast_track is None:
            self.fast_track = max(1, math.ceil(self.word_beam / 10))
        if not (self.action_beam >= self.word_beam >= self.fast_track >= 1):
            raise ValueError("need action_beam >= word_beam >= fast_track >= 1")


@dataclass
class BeamItem:
    state: object
    logprob: float
    actions: tuple
    serial: int


def _logsumexp(values):
    if not values:
        return -math.inf
    arr = np.asarray(values, dtype=np.float64)
    m = arr.max()
    return float(m + np.log(np.exp(arr - m).sum()))


def beam_decode(model, tokens, config=BeamConfig(), limits=Limits()):
    """Top word-synchronised parses of ``tokens``, descending by joint score.

    Returns a list of (Tree, joint log-prob); an empty list is the explicit
    beam-failure result (no hypothesis survived).  Deterministic: ties break
    by item creation order.
    """
    if not tokens:
        raise ValueError("empty sentence")
    tape = Tape()
    serial = [0]

    def make_item(state, logprob, actions):
        serial[0] += 1
        return BeamItem(state, logprob, actions, serial[0])

    current = [make_item(model.initial_state(tape), 0.0, ())]
    for word in tokens:
        word_id = model.vocab.encode(word)
        buffer = []
        frontier = current
        # Structural expansion between words terminates: NT pushes are
        # bounded by the open-constituent limit and REDUCE pops are bounded
        # by stack depth, with no NT/REDUCE cycle possible without a GEN.
        while frontier:
            lexical = []     # (score, item, action)
            structural = []
            for item in frontier:
                if item.state.finished:
                    # root closed before this word: dead hypothesis
                    continue
                legal = model.legal_actions(item.state, limits)
                act_lp = model.action_logprobs(tape, item.state, limits).value
                if legal[A_GEN]:
                    word_lp = model.word_logprobs(tape, item.state).value
                    lexical.append((item.logprob + act_lp[A_GEN] + word_lp[word_id],
                                    item, Action(GEN, word)))
                if legal[A_NT]:
                    nt_lp = model.nt_logprobs(tape, item.state).value
                    for i, label in enumerate(model.nt_labels):
                        structural.append((item.logprob + act_lp[A_NT] + nt_lp[i],
                                           item, Action(NT, label)))
                if legal[A_REDUCE]:
                    structural.append((item.logprob + act_lp[A_REDUCE],
                                       item, Action(REDUCE)))

            def key(cand):
                return (-cand[0], cand[1].serial)

            lexical.sort(key=key)
            promoted = lexical[:config.fast_track]
            pool = structural + lexical[config.fast_track:]
            pool.sort(key=key)
            pool = pool[:config.action_beam]

            frontier = []
            for score, item, action in promoted + pool:
                new_state = model.apply_action(tape, item.state, action, limits)
                new_item = make_item(new_state, score, item.actions + (action,))
                if action.kind == GEN:
                    buffer.append(new_item)
                else:
                    frontier.append(new_item)
        if not buffer:
            return []
        buffer.sort(key=lambda it: (-it.logprob, it.serial))
        current = buffer[:config.word_beam]

    results = []
    for item in current:
        state, logprob = item.state, item.logprob
        # Force closure of remaining constituents, scored by the masked
        # action head with no further branching.
        while not state.finished:
            legal = model.legal_actions(state, limits)
            if not legal[A_REDUCE]:
                break
            act_lp = model.action_logprobs(tape, state, limits).value
            logprob += act_lp[A_REDUCE]
            state = model.apply_action(tape, state, Action(REDUCE), limits)
        if state.finished:
            results.append((state.tree, logprob))
    results.sort(key=lambda pair: -pair[1])
    return results


def marginal_lower_bound(model, tokens, config=BeamConfig(), limits=Limits()):
    """logsumexp of beam scores: a guaranteed underestimate of log t(x).

    Beam failure surfaces as -inf, never silently.
    """
    return _logsumexp([lp for _, lp in beam_decode(model, tokens, config, limits)])


def exact_marginal(model, tokens, limits, budget=10**6):
    """log t(x) by exhaustive enumeration of derivations yielding exactly x.

    -inf if the sentence is underivable within the limits; raises if the
    number of explored derivations exceeds ``budget``.
    """
    tape = Tape()
    n = len(tokens)
    scores = []
    explored = [0]

    def dfs(state, logprob, pos):
        if state.finished:
            explored[0] += 1
            if explored[0] > budget:
                raise EnumerationBudgetExceeded(
                    f"more than {budget} derivations explored")
            if pos == n:
                scores.append(logprob)
            return
        legal = model.legal_actions(state, limits)
        act_lp = model.action_logprobs(tape, state, limits).value
        if legal[A_GEN] and pos < n:
            word_lp = model.word_logprobs(tape, state).value
            word_id = model.vocab.encode(tokens[pos])
            action = Action(GEN, tokens[pos])
            dfs(model.apply_action(tape, state, action, limits),
                logprob + act_lp[A_GEN] + word_lp[word_id], pos + 1)
        # A constituent opened after the last terminal could never be
        # filled, so NT is only explored while terminals remain.
        if legal[A_NT] and pos < n:
            nt_lp = model.nt_logprobs(tape, state).value
            for i, label in enumerate(model.nt_labels):
                dfs(model.apply_action(tape, state, Action(NT, label), limits),
                    logprob + act_lp[A_NT] + nt_lp[i], pos)
        if legal[A_REDUCE]:
            dfs(model.apply_action(tape, state, Action(REDUCE), limits),
                logprob + act_lp[A_REDUCE], pos)

    dfs(model.initial_state(tape), 0.0, 0)
    return _logsumexp(scores)


def enumerate_complete_derivations(model, limits, budget=10**6):
    """All complete derivations within the limits as (Tree, joint log-prob)."""
    tape = Tape()
    out = []

    def dfs(state, logprob):
        if state.finished:
            out.append((state.tree, logprob))
            if len(out) > budget:
                raise EnumerationBudgetExceeded(
                    f"more than {budget} complete derivations")
            return
        legal = model.legal_actions(state, limits)
        act_lp = model.action_logprobs(tape, state, limits).value
        if legal[A_GEN]:
            word_lp = model.word_logprobs(tape, state).value
            for word_id in range(len(model.vocab)):
                action = Action(GEN, model.vocab.decode(word_id))
                dfs(model.apply_action(tape, state, action, limits),
                    logprob + act_lp[A_GEN] + word_lp[word_id])
        if legal[A_NT]:
            nt_lp = model.nt_logprobs(tape, state).value
            for i, label in enumerate(model.nt_labels):
                dfs(model.apply_action(tape, state, Action(NT, label), limits),
                    logprob + act_lp[A_NT] + nt_lp[i])
        if legal[A_REDUCE]:
            dfs(model.apply_action(tape, state, Action(REDUCE), limits),
                logprob + act_lp[A_REDUCE])

    dfs(model.initial_state(tape), 0.0)
    return out


def sample_joint(model, seed, limits=Limits(), max_failures=1000):
    """Ancestral sample of (sentence tokens, Tree) from the joint model."""
    rng = np.random.default_rng(seed)
    max_actions = limits.max_length * (limits.max_open_nts + 2) + 2
    failures = 0
    while True:
        tape = Tape()
        state = model.initial_state(tape)
        for _ in range(max_actions):
            if state.finished:
                return state.tree.leaves(), state.tree
            act_p = np.exp(model.action_logprobs(tape, state, limits).value)
            act_p /= act_p.sum()
            kind = rng.choice(3, p=act_p)
            if kind == A_GEN:
                word_p = np.exp(model.word_logprobs(tape, state).value)
                word_p /= word_p.sum()
                word = model.vocab.decode(rng.choice(len(word_p), p=word_p))
                action = Action(GEN, word)
            elif kind == A_NT:
                nt_p = np.exp(model.nt_logprobs(tape, state).value)
                nt_p /= nt_p.sum()
                action = Action(NT, model.nt_labels[rng.choice(len(nt_p), p=nt_p)])
            else:
                action = Action(REDUCE)
            state = model.apply_action(tape, state, action, limits)
        if state.finished:
            return state.tree.leaves(), state.tree
        failures += 1
        if failures > max_failures:
            raise RuntimeError(f"sampling failed {failures} times; limits too tight")
