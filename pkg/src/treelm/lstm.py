"""Two-layer LSTM language model: student architecture, baseline LM, and
born-again teacher.  Sentences are modelled independently; every sentence
contributes len+1 prediction events (each token plus EOS)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .autodiff import ParameterStore, Tape, sample_dropout_mask

N_LAYERS = 2


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    hidden_size: int = 128
    embed_size: int = 128
    lr: float = 0.45
    decay: float = 0.9
    decay_start_epoch: int = 10
    dropout: float = 0.2
    batch_size: int = 20
    max_epochs: int = 40
    seed: int = 0
    clip_norm: float = 5.0

    def validate(self):
        if self.hidden_size <= 0 or self.embed_size <= 0 or self.batch_size <= 0:
            raise ValueError("sizes must be positive")
        if not (0.0 < self.lr):
            raise ValueError("lr must be positive")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError("decay must be in (0,1]")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0,1)")


@dataclass
class EpochLog:
    epoch: int
    train_nll: float
    valid_ppl: float
    lr: float


class LstmLmModel:
    def __init__(self, vocab, hidden_size, embed_size, seed=0, params=None):
        self.vocab = vocab
        self.hidden_size = hidden_size
        self.embed_size = embed_size
        self.seed = seed
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        v, h, e = len(vocab), hidden_size, embed_size
        self.store.add("emb", (v, e), rng)
        for layer in range(N_LAYERS):
            in_dim = e if layer == 0 else h
            self.store.add(f"lstm{layer}.W", (4 * h, in_dim + h), rng)
            self.store.add(f"lstm{layer}.b", (4 * h,), rng)
        self.store.add("out.W", (v, h), rng)
        self.store.add("out.b", (v,), rng)
        if params is not None:
            self.store.load(params)

    # -- forward -----------------------------------------------------------

    def initial_state(self, tape):
        zero_h = tape.constant(np.zeros(self.hidden_size))
        return [(zero_h, zero_h) for _ in range(N_LAYERS)]

    def step(self, tape, x, state, masks=None):
        """Advance all layers by one input; returns (new_state, top hidden)."""
        h_size = self.hidden_size
        new_state = []
        inp = x
        for layer in range(N_LAYERS):
            h_prev, c_prev = state[layer]
            if masks is not None:
                in_mask, rec_mask = masks[layer]
                inp = tape.apply_mask(inp, in_mask)
                h_prev = tape.apply_mask(h_prev, rec_mask)
            w = tape.param(self.store, f"lstm{layer}.W")
            b = tape.param(self.store, f"lstm{layer}.b")
            gates = tape.add(tape.matvec(w, tape.concat([inp, h_prev])), b)
            i = tape.sigmoid(tape.narrow(gates, 0, h_size))
            f = tape.sigmoid(tape.narrow(gates, h_size, h_size))
            o = tape.sigmoid(tape.narrow(gates, 2 * h_size, h_size))
            g = tape.tanh(tape.narrow(gates, 3 * h_size, h_size))
            c = tape.add(tape.mul(f, state[layer][1]), tape.mul(i, g))
            h = tape.mul(o, tape.tanh(c))
            new_state.append((h, c))
            inp = h
        return new_state, new_state[-1][0]

    def logprobs_from_hidden(self, tape, h):
        w = tape.param(self.store, "out.W")
        b = tape.param(self.store, "out.b")
        return tape.log_softmax(tape.add(tape.matvec(w, h), b))

    def sample_masks(self, rng, rate):
        masks = []
        for layer in range(N_LAYERS):
            in_dim = self.embed_size if layer == 0 else self.hidden_size
            masks.append((sample_dropout_mask(rng, (in_dim,), rate),
                          sample_dropout_mask(rng, (self.hidden_size,), rate)))
        return masks

    def sentence_loss(self, tape, token_ids, masks=None, target_weights=None):
        """Negative log likelihood node, summed over len+1 prediction events.

        target_weights[j] replaces the one-hot target at position j with an
        arbitrary constant weight vector over the vocabulary (cross-entropy
        against a soft target); None entries keep the plain NLL path.
        """
        targets = list(token_ids) + [self.vocab.eos_id]
        if target_weights is not None and len(target_weights) != len(targets):
            raise ValueError("target_weights length must be len(sentence)+1")
        emb = tape.param(self.store, "emb")
        state = self.initial_state(tape)
        h = state[-1][0]
        terms = []
        for j, target in enumerate(targets):
            logp = self.logprobs_from_hidden(tape, h)
            weights = target_weights[j] if target_weights is not None else None
            if weights is None:
                terms.append(tape.scale(tape.pick(logp, target), -1.0))
            else:
                terms.append(tape.scale(tape.weighted_sum(logp, weights), -1.0))
            if j < len(token_ids):
                state, h = self.step(tape, tape.row(emb, token_ids[j]),
                                     state, masks)
        return tape.add_n(terms)

    def sentence_nll(self, tokens):
        """-log q(sentence) including the EOS target; dropout disabled."""
        if not tokens:
            raise ValueError("empty sentence")
        tape = Tape()
        ids = self.vocab.encode_sentence(tokens)
        return float(self.sentence_loss(tape, ids).value)

    def next_word_logprobs(self, prefix_tokens):
        """Full-vocabulary log-probability vector after an (UNK-mapped) prefix."""
        tape = Tape()
        ids = self.vocab.encode_sentence(prefix_tokens)
        emb = tape.param(self.store, "emb")
        state = self.initial_state(tape)
        h = state[-1][0]
        for i in ids:
            state, h = self.step(tape, tape.row(emb, i), state)
        return self.logprobs_from_hidden(tape, h).value.copy()

    def all_next_word_logprobs(self, tokens):
        """Log-probability rows for every prediction event of a sentence
        (len+1 rows of |vocab|), from one forward pass with dropout off."""
        tape = Tape()
        ids = self.vocab.encode_sentence(tokens)
        emb = tape.param(self.store, "emb")
        state = self.initial_state(tape)
        h = state[-1][0]
        rows = []
        for i in ids:
            rows.append(self.logprobs_from_hidden(tape, h).value.copy())
            state, h = self.step(tape, tape.row(emb, i), state)
        rows.append(self.logprobs_from_hidden(tape, h).value.copy())
        return np.array(rows)

    def hidden_states(self, tokens):
        """Top-layer hidden states after consuming each of x_1..x_n and EOS."""
        tape = Tape()
        ids = self.vocab.encode_sentence(tokens) + [self.vocab.eos_id]
        emb = tape.param(self.store, "emb")
        state = self.initial_state(tape)
        states = []
        for i in ids:
            state, h = self.step(tape, tape.row(emb, i), state)
            states.append(h.value.copy())
        return states

    # -- persistence ---------------------------------------------------------

    def hyper(self):
        return {"model": "lstm-lm",
                "hidden_size": str(self.hidden_size),
                "embed_size": str(self.embed_size),
                "vocab_size": str(len(self.vocab))}

    def save(self, path):
        checkpoint.save_checkpoint(path, self.store.params, self.seed,
                                   self.hyper(), self.vocab.content_hash())

    @classmethod
    def load(cls, path, vocab):
        params, seed, hyper, vocab_hash = checkpoint.load_checkpoint(path)
        if vocab_hash != vocab.content_hash():
            raise ValueError(f"{path}: vocabulary hash mismatch")
        if hyper.get("model") != "lstm-lm":
            raise ValueError(f"{path}: not an lstm-lm checkpoint")
        return cls(vocab, int(hyper["hidden_size"]), int(hyper["embed_size"]),
                   seed=seed, params=params)


def perplexity(model, corpus):
    """exp of token-averaged NLL over the corpus, EOS targets included."""
    if not corpus:
        raise ValueError("empty corpus")
    total_nll = 0.0
    total_tokens = 0
    for tokens in corpus:
        total_nll += model.sentence_nll(tokens)
        total_tokens += len(tokens) + 1
    return math.exp(total_nll / total_tokens)


def sgd_train(model, config, train_corpus, valid_corpus, loss_builder,
              progress=None):
    """Shared SGD loop: shuffled sentence minibatches with gradient
    accumulation, per-epoch validation perplexity, exponential lr decay, and
    best-valid checkpoint selection.

    loss_builder(tape, token_ids, masks, sentence_index) -> scalar loss node.
    Dropout masks are drawn here so that any two objectives consume
    randomness identically.
    """
    config.validate()
    if not train_corpus or not valid_corpus:
        raise ValueError("corpora must be nonempty")
    encoded = [model.vocab.encode_sentence(s) for s in train_corpus]
    rng = np.random.default_rng(config.seed)
    lr = config.lr
    best_ppl = float("inf")
    best_params = model.store.snapshot()
    logs = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(encoded))
        epoch_nll = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            model.store.zero_grads()
            for idx in batch:
                ids = encoded[idx]
                masks = (model.sample_masks(rng, config.dropout)
                         if config.dropout > 0 else None)
                tape = Tape()
                try:
                    loss = loss_builder(tape, ids, masks, idx)
                except FloatingPointError as exc:
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, "
                        f"batch {start // config.batch_size}") from exc
                value = float(loss.value)
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, "
                        f"batch {start // config.batch_size}")
                epoch_nll += value
                scaled = tape.scale(loss, 1.0 / len(batch))
                tape.backward(scaled)
            model.store.clip_grads(config.clip_norm)
            model.store.sgd_step(lr)
        valid_ppl = perplexity(model, valid_corpus)
        logs.append(EpochLog(epoch, epoch_nll / len(encoded), valid_ppl, lr))
        if progress is not None:
            progress(logs[-1])
        if valid_ppl < best_ppl:
            best_ppl = valid_ppl
            best_params = model.store.snapshot()
        if epoch >= config.decay_start_epoch:
            lr *= config.decay
    model.store.load(best_params)
    return logs


def train_lm(config, train_corpus, valid_corpus, vocab, progress=None):
    """Plain LM training; returns (model, per-epoch logs)."""
    model = LstmLmModel(vocab, config.hidden_size, config.embed_size,
                        seed=config.seed)

    def loss_builder(tape, ids, masks, idx):
        return model.sentence_loss(tape, ids, masks)

    logs = sgd_train(model, config, train_corpus, valid_corpus, loss_builder,
                     progress=progress)
    return model, logs


def write_train_log(path, logs):
    from .checkpoint import atomic_write

    def writer(fh):
        fh.write(b"epoch\ttrain_nll\tvalid_ppl\tlr\n")
        for row in logs:
            fh.write(f"{row.epoch}\t{row.train_nll:.6f}\t"
                     f"{row.valid_ppl:.6f}\t{row.lr:.6g}\n".encode())

    atomic_write(path, writer)
