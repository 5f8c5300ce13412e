"""Generative recurrent neural network grammar: joint model over strings and
trees driven by NT/GEN/REDUCE actions, a persistent stack encoder, and an
explicit bidirectional composition function."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .autodiff import ParameterStore, Tape, sample_dropout_mask
from .trees import GEN, NT, REDUCE, Tree, linearize

N_LAYERS = 2
A_NT, A_GEN, A_REDUCE = 0, 1, 2
ACTION_KINDS = (NT, GEN, REDUCE)


class IllegalAction(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Limits:
    max_open_nts: int = 40
    max_length: int = 120


@dataclass
class RnngConfig:
    hidden_size: int = 64
    lr: float = 0.3
    decay: float = 0.92
    decay_start_epoch: int = 10
    dropout: float = 0.3
    batch_size: int = 10
    max_epochs: int = 40
    seed: int = 0
    clip_norm: float = 5.0


class StackEntry:
    """Immutable element of a persistent stack; pop is just ``prev``.

    ``enc`` is the stack-encoder state (per layer (h, c)) with this entry on
    top, extended from the state beneath, so beam items and enumeration
    branches share prefixes structurally.
    """

    __slots__ = ("prev", "kind", "label", "tree", "vec", "enc")

    def __init__(self, prev, kind, label, tree, vec, enc):
        self.prev = prev
        self.kind = kind  # "guard" | "open" | "tree"
        self.label = label
        self.tree = tree
        self.vec = vec
        self.enc = enc


class ParserState:
    __slots__ = ("top", "open_count", "n_emitted", "n_actions")

    def __init__(self, top, open_count=0, n_emitted=0, n_actions=0):
        self.top = top
        self.open_count = open_count
        self.n_emitted = n_emitted
        self.n_actions = n_actions

    @property
    def finished(self):
        return (self.n_actions > 0 and self.open_count == 0
                and self.top.kind == "tree" and self.top.prev.kind == "guard")

    @property
    def tree(self):
        if not self.finished:
            raise ValueError("state not finished")
        return self.top.tree


class RnngModel:
    def __init__(self, vocab, nt_labels, hidden_size, seed=0, params=None):
        self.vocab = vocab
        self.nt_labels = list(nt_labels)
        self.nt_index = {label: i for i, label in enumerate(self.nt_labels)}
        if len(self.nt_index) != len(self.nt_labels):
            raise ValueError("duplicate nonterminal labels")
        self.hidden_size = hidden_size
        self.seed = seed
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        v, n, h = len(vocab), len(self.nt_labels), hidden_size
        self.store.add("wemb", (v, h), rng)
        self.store.add("ntemb", (n, h), rng)
        self.store.add("init", (h,), rng)
        for layer in range(N_LAYERS):
            self.store.add(f"stack{layer}.W", (4 * h, 2 * h), rng)
            self.store.add(f"stack{layer}.b", (4 * h,), rng)
        for name in ("cf", "cb"):
            self.store.add(f"{name}.W", (4 * h, 2 * h), rng)
            self.store.add(f"{name}.b", (4 * h,), rng)
        self.store.add("comp.W", (h, 2 * h), rng)
        self.store.add("comp.b", (h,), rng)
        self.store.add("act.W", (3, h), rng)
        self.store.add("act.b", (3,), rng)
        self.store.add("word.W", (v, h), rng)
        self.store.add("word.b", (v,), rng)
        self.store.add("nt.W", (n, h), rng)
        self.store.add("nt.b", (n,), rng)
        if params is not None:
            self.store.load(params)

    # -- encoder primitives --------------------------------------------------

    def _cell(self, tape, prefix, x, h_prev, c_prev, masks, layer):
        h_size = self.hidden_size
        if masks is not None:
            in_mask, rec_mask = masks[layer]
            x = tape.apply_mask(x, in_mask)
            h_in = tape.apply_mask(h_prev, rec_mask)
        else:
            h_in = h_prev
        w = tape.param(self.store, f"{prefix}.W")
        b = tape.param(self.store, f"{prefix}.b")
        gates = tape.add(tape.matvec(w, tape.concat([x, h_in])), b)
        i = tape.sigmoid(tape.narrow(gates, 0, h_size))
        f = tape.sigmoid(tape.narrow(gates, h_size, h_size))
        o = tape.sigmoid(tape.narrow(gates, 2 * h_size, h_size))
        g = tape.tanh(tape.narrow(gates, 3 * h_size, h_size))
        c = tape.add(tape.mul(f, c_prev), tape.mul(i, g))
        h = tape.mul(o, tape.tanh(c))
        return h, c

    def _advance_stack(self, tape, enc_below, x, masks):
        new_enc = []
        inp = x
        for layer in range(N_LAYERS):
            h_prev, c_prev = enc_below[layer]
            h, c = self._cell(tape, f"stack{layer}", inp, h_prev, c_prev,
                              masks, layer)
            new_enc.append((h, c))
            inp = h
        return new_enc

    def sample_masks(self, rng, rate):
        h = self.hidden_size
        return [(sample_dropout_mask(rng, (h,), rate),
                 sample_dropout_mask(rng, (h,), rate))
                for _ in range(N_LAYERS)]

    def initial_state(self, tape, masks=None):
        zero = tape.constant(np.zeros(self.hidden_size))
        enc0 = [(zero, zero) for _ in range(N_LAYERS)]
        init = tape.param(self.store, "init")
        enc = self._advance_stack(tape, enc0, init, masks)
        guard = StackEntry(None, "guard", None, None, init, enc)
        return ParserState(guard)

    def hidden(self, state):
        return state.top.enc[-1][0]

    # -- heads ---------------------------------------------------------------

    def action_logprobs(self, tape, state, limits):
        legal = self.legal_actions(state, limits)
        w = tape.param(self.store, "act.W")
        b = tape.param(self.store, "act.b")
        logits = tape.add(tape.matvec(w, self.hidden(state)), b)
        return tape.masked_log_softmax(logits, legal)

    def word_logprobs(self, tape, state):
        w = tape.param(self.store, "word.W")
        b = tape.param(self.store, "word.b")
        return tape.log_softmax(tape.add(tape.matvec(w, self.hidden(state)), b))

    def nt_logprobs(self, tape, state):
        w = tape.param(self.store, "nt.W")
        b = tape.param(self.store, "nt.b")
        return tape.log_softmax(tape.add(tape.matvec(w, self.hidden(state)), b))

    # -- transition system -----------------------------------------------------

    def legal_actions(self, state, limits):
        """Boolean mask over (NT, GEN, REDUCE).

        NT additionally requires that terminals can still be emitted;
        otherwise a freshly opened constituent could never be filled and the
        derivation would dead-end, breaking normalisation.
        """
        if state.finished:
            raise IllegalAction("no actions from a finished state")
        legal = np.zeros(3, dtype=bool)
        legal[A_NT] = (state.open_count < limits.max_open_nts
                       and state.n_emitted < limits.max_length)
        legal[A_GEN] = (state.open_count >= 1
                        and state.n_emitted < limits.max_length)
        legal[A_REDUCE] = (state.open_count >= 1
                           and state.top.kind != "open")
        return legal

    def compose(self, tape, child_vecs, nt_vec):
        """Bidirectional sequence encoding of [nt; children...], affine + tanh."""
        if not child_vecs:
            raise IllegalAction("compose needs at least one child")
        seq = [nt_vec] + list(child_vecs)
        zero = tape.constant(np.zeros(self.hidden_size))

        def run(prefix, items):
            h, c = zero, zero
            for x in items:
                h, c = self._cell(tape, prefix, x, h, c, None, 0)
            return h

        fwd = run("cf", seq)
        bwd = run("cb", list(reversed(seq)))
        w = tape.param(self.store, "comp.W")
        b = tape.param(self.store, "comp.b")
        return tape.tanh(tape.add(tape.matvec(w, tape.concat([fwd, bwd])), b))

    def apply_action(self, tape, state, action, limits, masks=None):
        legal = self.legal_actions(state, limits)
        if action.kind == NT:
            if not legal[A_NT]:
                raise IllegalAction(
                    "NT illegal: open-constituent or length limit reached")
            if action.payload not in self.nt_index:
                raise IllegalAction(f"unknown nonterminal {action.payload!r}")
            ntemb = tape.param(self.store, "ntemb")
            vec = tape.row(ntemb, self.nt_index[action.payload])
            enc = self._advance_stack(tape, state.top.enc, vec, masks)
            top = StackEntry(state.top, "open", action.payload, None, vec, enc)
            return ParserState(top, state.open_count + 1, state.n_emitted,
                               state.n_actions + 1)
        if action.kind == GEN:
            if not legal[A_GEN]:
                raise IllegalAction(
                    "GEN illegal: no open constituent or length limit reached")
            wemb = tape.param(self.store, "wemb")
            vec = tape.row(wemb, self.vocab.encode(action.payload))
            enc = self._advance_stack(tape, state.top.enc, vec, masks)
            top = StackEntry(state.top, "tree", None, Tree(action.payload),
                             vec, enc)
            return ParserState(top, state.open_count, state.n_emitted + 1,
                               state.n_actions + 1)
        if action.kind == REDUCE:
            if not legal[A_REDUCE]:
                raise IllegalAction(
                    "REDUCE illegal: empty constituent or nothing open")
            children = []
            entry = state.top
            while entry.kind == "tree":
                children.append(entry)
                entry = entry.prev
            assert entry.kind == "open"
            children.reverse()
            composed = self.compose(tape, [c.vec for c in children], entry.vec)
            subtree = Tree(entry.label, [c.tree for c in children])
            below = entry.prev
            enc = self._advance_stack(tape, below.enc, composed, masks)
            top = StackEntry(below, "tree", None, subtree, composed, enc)
            return ParserState(top, state.open_count - 1, state.n_emitted,
                               state.n_actions + 1)
        raise IllegalAction(f"unknown action kind {action.kind!r}")

    # -- scoring ---------------------------------------------------------------

    def action_score(self, tape, state, action, limits):
        """Masked log p(action kind) plus payload log-prob under its head."""
        kind_id = ACTION_KINDS.index(action.kind)
        logp = tape.pick(self.action_logprobs(tape, state, limits), kind_id)
        if action.kind == GEN:
            payload = tape.pick(self.word_logprobs(tape, state),
                                self.vocab.encode(action.payload))
            logp = tape.add(logp, payload)
        elif action.kind == NT:
            payload = tape.pick(self.nt_logprobs(tape, state),
                                self.nt_index[action.payload])
            logp = tape.add(logp, payload)
        return logp

    def joint_logprob(self, tape, tree, limits=Limits(), masks=None,
                      collect_word_states=False):
        """log t(x, y) by forcing the linearised derivation of ``tree``.

        With collect_word_states, also returns the stack hidden state node
        before each GEN (the teacher-state cache payload).
        """
        state = self.initial_state(tape, masks)
        terms = []
        word_states = []
        for idx, action in enumerate(linearize(tree)):
            try:
                if collect_word_states and action.kind == GEN:
                    word_states.append(self.hidden(state))
                terms.append(self.action_score(tape, state, action, limits))
                state = self.apply_action(tape, state, action, limits, masks)
            except IllegalAction as exc:
                raise IllegalAction(f"action {idx} ({action}): {exc}") from exc
        total = tape.add_n(terms)
        if collect_word_states:
            return total, word_states
        return total


def joint_nll(model, trees, limits=Limits()):
    """Mean joint NLL per action over a treebank (validation metric)."""
    total, n_actions = 0.0, 0
    for tree in trees:
        tape = Tape()
        total -= float(model.joint_logprob(tape, tree, limits).value)
        n_actions += len(linearize(tree))
    return total / n_actions


def train_rnng(config, train_trees, valid_trees, vocab, nt_labels,
               limits=Limits(), progress=None):
    """SGD over shuffled tree minibatches minimising mean -joint_logprob;
    returns (model, per-epoch logs with validation joint NLL)."""
    if not train_trees or not valid_trees:
        raise ValueError("treebanks must be nonempty")
    model = RnngModel(vocab, nt_labels, config.hidden_size, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    lr = config.lr
    best_nll = float("inf")
    best_params = model.store.snapshot()
    logs = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_trees))
        epoch_nll = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            model.store.zero_grads()
            for idx in batch:
                masks = (model.sample_masks(rng, config.dropout)
                         if config.dropout > 0 else None)
                tape = Tape()
                try:
                    logp = model.joint_logprob(tape, train_trees[idx], limits,
                                               masks)
                except FloatingPointError as exc:
                    raise TrainingDiverged(
                        f"non-finite score at epoch {epoch}, "
                        f"batch {start // config.batch_size}") from exc
                value = float(logp.value)
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite score at epoch {epoch}, "
                        f"batch {start // config.batch_size}")
                epoch_nll -= value
                loss = tape.scale(logp, -1.0 / len(batch))
                tape.backward(loss)
            model.store.clip_grads(config.clip_norm)
            model.store.sgd_step(lr)
        valid_nll = joint_nll(model, valid_trees, limits)
        logs.append((epoch, epoch_nll / len(train_trees), valid_nll, lr))
        if progress is not None:
            progress(logs[-1])
        if valid_nll < best_nll:
            best_nll = valid_nll
            best_params = model.store.snapshot()
        if epoch >= config.decay_start_epoch:
            lr *= config.decay
    model.store.load(best_params)
    return model, logs


def save_rnng(model, path):
    hyper = {"model": "rnng",
             "hidden_size": str(model.hidden_size),
             "vocab_size": str(len(model.vocab)),
             "nt_labels": ",".join(model.nt_labels)}
    checkpoint.save_checkpoint(path, model.store.params, model.seed, hyper,
                               model.vocab.content_hash())


def load_rnng(path, vocab):
    params, seed, hyper, vocab_hash = checkpoint.load_checkpoint(path)
    if vocab_hash != vocab.content_hash():
        raise ValueError(f"{path}: vocabulary hash mismatch")
    if hyper.get("model") != "rnng":
        raise ValueError(f"{path}: not an rnng checkpoint")
    return RnngModel(vocab, hyper["nt_labels"].split(","),
                     int(hyper["hidden_size"]), seed=seed, params=params)
