"""Word-level knowledge distillation: teacher next-word distributions from
forced tree prefixes, the teacher hidden-state cache, and student training
with the interpolated objective (plus born-again and Monte-Carlo variants).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .checkpoint import atomic_write
from .lstm import LstmLmModel, TrainConfig, sgd_train
from .rnng import Limits
from .trees import GEN, attach_eos, linearize, print_bracketed
from .inference import sample_joint

CACHE_MAGIC = b"TREELMTC"
CACHE_VERSION = 1

TEACHER_KINDS = ("rnng-cache", "lstm", "mc-samples")


@dataclass
class DistillConfig:
    alpha: float = 0.5
    teacher_kind: str = "rnng-cache"
    student: TrainConfig = field(default_factory=TrainConfig)
    sample_count: int = 1000  # K, mc-samples mode only

    def validate(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if self.teacher_kind not in TEACHER_KINDS:
            raise ValueError(f"teacher_kind must be one of {TEACHER_KINDS}")
        self.student.validate()


def corpus_fingerprint(trees):
    """Content hash of a treebank (bracketed text, line order significant)."""
    h = hashlib.sha256()
    for tree in trees:
        h.update(print_bracketed(tree).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def teacher_next_word_dist(teacher, sentence, gold_tree, position,
                           limits=Limits()):
    """Teacher word-head softmax after forcing the gold action prefix.

    ``position`` is 1-based over the len+1 prediction events (the last one
    is EOS).  The prefix runs up to, but not including, the GEN of the
    target event; the EOS leaf is attached to the gold tree internally.
    """
    n = len(sentence)
    if not (1 <= position <= n + 1):
        raise ValueError(f"position {position} outside 1..{n + 1}")
    tree = attach_eos(gold_tree, teacher.vocab.decode(teacher.vocab.eos_id))
    if tree.leaves()[:-1] != list(sentence):
        raise ValueError("tree leaves do not match sentence")
    tape = Tape()
    state = teacher.initial_state(tape)
    n_gen = 0
    for idx, action in enumerate(linearize(tree)):
        if action.kind == GEN:
            n_gen += 1
            if n_gen == position:
                logp = teacher.word_logprobs(tape, state).value
                return np.exp(logp)
        state = teacher.apply_action(tape, state, action, limits)
    raise AssertionError("position not reached; tree/sentence inconsistent")


class TeacherCache:
    """Per-token teacher hidden states plus the teacher's word projection.

    Stores h (size M) per prediction event rather than the |vocab|-sized
    distribution; the softmax is reconstructed on the fly as
    softmax(W_x h + b_x).
    """

    def __init__(self, w_x, b_x, vocab_hash, fingerprint, sentence_states):
        self.w_x = w_x
        self.b_x = b_x
        self.vocab_hash = vocab_hash
        self.fingerprint = fingerprint
        self.sentence_states = sentence_states  # list of (len+1, M) arrays

    @property
    def hidden_size(self):
        return self.w_x.shape[1]

    def __len__(self):
        return len(self.sentence_states)

    def reconstruct(self, sentence_index, position):
        """Teacher next-word distribution for 1-based prediction event."""
        h = self.sentence_states[sentence_index][position - 1]
        logits = self.w_x @ h + self.b_x
        logits -= logits.max()
        p = np.exp(logits)
        return p / p.sum()

    def save(self, path):
        def writer(fh):
            fh.write(CACHE_MAGIC)
            fh.write(struct.pack("<III", CACHE_VERSION, self.hidden_size,
                                 self.w_x.shape[0]))
            for text in (self.vocab_hash, self.fingerprint):
                data = text.encode("utf-8")
                fh.write(struct.pack("<I", len(data)))
                fh.write(data)
            fh.write(self.w_x.astype("<f8").tobytes())
            fh.write(self.b_x.astype("<f8").tobytes())
            fh.write(struct.pack("<I", len(self.sentence_states)))
            for idx, states in enumerate(self.sentence_states):
                fh.write(struct.pack("<II", idx, states.shape[0]))
                fh.write(np.ascontiguousarray(states).astype("<f8").tobytes())

        atomic_write(path, writer)

    @classmethod
    def load(cls, path, vocab=None):
        with open(path, "rb") as fh:
            if fh.read(8) != CACHE_MAGIC:
                raise ValueError(f"{path}: not a teacher cache")
            version, m, v = struct.unpack("<III", fh.read(12))
            if version != CACHE_VERSION:
                raise ValueError(f"{path}: unsupported cache version {version}")

            def read_str():
                (n,) = struct.unpack("<I", fh.read(4))
                return fh.read(n).decode("utf-8")

            vocab_hash = read_str()
            fingerprint = read_str()
            w_x = np.frombuffer(fh.read(v * m * 8), dtype="<f8").reshape(v, m)
            b_x = np.frombuffer(fh.read(v * 8), dtype="<f8")
            (n_sentences,) = struct.unpack("<I", fh.read(4))
            states = []
            for _ in range(n_sentences):
                idx, rows = struct.unpack("<II", fh.read(8))
                arr = np.frombuffer(fh.read(rows * m * 8),
                                    dtype="<f8").reshape(rows, m)
                states.append(arr)
        cache = cls(w_x, b_x, vocab_hash, fingerprint, states)
        if vocab is not None and vocab.content_hash() != vocab_hash:
            raise ValueError(f"{path}: vocabulary hash mismatch")
        return cache


def build_cache(teacher, trees, path=None, limits=Limits(),
                check_fraction=0.01, seed=0, tolerance=1e-6):
    """Teacher state cache for a treebank; re-checks a sample of positions
    against the direct forced-prefix computation before accepting."""
    eos = teacher.vocab.decode(teacher.vocab.eos_id)
    sentence_states = []
    sentences = []
    for tree in trees:
        sentences.append(tree.leaves())
        tape = Tape()
        _, nodes = teacher.joint_logprob(tape, attach_eos(tree, eos), limits,
                                         collect_word_states=True)
        sentence_states.append(np.array([n.value for n in nodes]))
    cache = TeacherCache(teacher.store.params["word.W"].copy(),
                         teacher.store.params["word.b"].copy(),
                         teacher.vocab.content_hash(),
                         corpus_fingerprint(trees),
                         sentence_states)

    rng = np.random.default_rng(seed)
    positions = [(i, j + 1) for i, s in enumerate(sentences)
                 for j in range(len(s) + 1)]
    n_check = max(1, int(len(positions) * check_fraction))
    for k in rng.choice(len(positions), size=n_check, replace=False):
        i, j = positions[k]
        direct = teacher_next_word_dist(teacher, sentences[i], trees[i], j,
                                        limits)
        err = np.abs(cache.reconstruct(i, j) - direct).max()
        if err > tolerance:
            raise RuntimeError(
                f"cache reconstruction mismatch {err:.3g} at sentence {i}, "
                f"position {j}")
    if path is not None:
        cache.save(path)
    return cache


def kd_term(teacher_dist, student_logprobs, tolerance=1e-8):
    """Cross-entropy H(t, q) = -sum_w t(w) log q(w) for one prediction event."""
    t = np.asarray(teacher_dist, dtype=np.float64)
    log_q = np.asarray(student_logprobs, dtype=np.float64)
    if abs(t.sum() - 1.0) > tolerance:
        raise ValueError(f"teacher distribution sums to {t.sum()}")
    if abs(np.exp(log_q).sum() - 1.0) > tolerance:
        raise ValueError("student log-probs are not normalised")
    return float(-(t * log_q).sum())


def interpolated_loss(alpha, teacher_dist, student_logprobs, true_word):
    """alpha * H(t, q) + (1 - alpha) * NLL of the true next word."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    nll = -float(np.asarray(student_logprobs)[true_word])
    return alpha * kd_term(teacher_dist, student_logprobs) + (1 - alpha) * nll


def mixed_target(alpha, teacher_dist, true_word, vocab_size):
    """alpha * t + (1 - alpha) * onehot(true word): the soft training target."""
    target = (1.0 - alpha) * np.eye(1, vocab_size, true_word)[0]
    if alpha > 0.0:
        target = target + alpha * np.asarray(teacher_dist, dtype=np.float64)
    return target


def sample_teacher_corpus(teacher, n_sentences, seed, limits=Limits()):
    """Surface strings sampled from the joint teacher, nonterminals ignored;
    the trailing EOS terminal is stripped."""
    eos = teacher.vocab.decode(teacher.vocab.eos_id)
    out = []
    for k in range(n_sentences):
        tokens, _ = sample_joint(teacher, seed + k, limits)
        if tokens and tokens[-1] == eos:
            tokens = tokens[:-1]
        if tokens:
            out.append(tokens)
    return out


def train_distilled(config, train_sentences, valid_sentences, vocab,
                    cache=None, teacher_lstm=None, teacher_rnng=None,
                    expected_fingerprint=None, limits=Limits(), progress=None):
    """Student training with the interpolated KD + LM objective.

    rnng-cache mode reads teacher distributions from ``cache``; lstm mode
    (born-again) computes them on the fly from ``teacher_lstm``; mc-samples
    mode replaces the corpus with strings sampled from ``teacher_rnng`` and
    runs plain NLL training.  With alpha == 0 the per-sentence losses are
    built exactly as in plain LM training, so the run is bitwise identical
    to train_lm at the same seed.
    """
    config.validate()
    student_cfg = config.student

    if config.teacher_kind == "mc-samples":
        if teacher_rnng is None:
            raise ValueError("mc-samples mode needs teacher_rnng")
        sampled = sample_teacher_corpus(teacher_rnng, config.sample_count,
                                        seed=student_cfg.seed, limits=limits)
        from .lstm import train_lm
        return train_lm(student_cfg, sampled, valid_sentences, vocab,
                        progress=progress)

    # Teacher distributions are constants: precompute the per-event mixed
    # targets once (they do not change across epochs).
    encoded = [vocab.encode_sentence(s) for s in train_sentences]
    all_targets = None
    if config.alpha > 0.0:
        if config.teacher_kind == "rnng-cache":
            if cache is None:
                raise ValueError("rnng-cache mode needs a TeacherCache")
            if cache.vocab_hash != vocab.content_hash():
                raise ValueError("cache vocabulary hash mismatch")
            if expected_fingerprint is not None \
                    and cache.fingerprint != expected_fingerprint:
                raise ValueError("cache corpus fingerprint mismatch")
            if len(cache) != len(train_sentences):
                raise ValueError(
                    f"cache covers {len(cache)} sentences, corpus has "
                    f"{len(train_sentences)}")
            for i, ids in enumerate(encoded):
                if cache.sentence_states[i].shape[0] != len(ids) + 1:
                    raise ValueError(f"cache sentence {i}: wrong event count")
            teacher_dist = cache.reconstruct
        else:  # born-again
            if teacher_lstm is None:
                raise ValueError("lstm mode needs teacher_lstm")
            if teacher_lstm.vocab.content_hash() != vocab.content_hash():
                raise ValueError("teacher vocabulary hash mismatch")
            rows_by_sentence = [teacher_lstm.all_next_word_logprobs(s)
                                for s in train_sentences]

            def teacher_dist(i, position):
                return np.exp(rows_by_sentence[i][position - 1])

        all_targets = []
        for i, ids in enumerate(encoded):
            targets = list(ids) + [vocab.eos_id]
            all_targets.append([
                mixed_target(config.alpha, teacher_dist(i, j + 1), t, len(vocab))
                for j, t in enumerate(targets)])

    model = LstmLmModel(vocab, student_cfg.hidden_size, student_cfg.embed_size,
                        seed=student_cfg.seed)

    def loss_builder(tape, ids, masks, idx):
        weights = all_targets[idx] if all_targets is not None else None
        return model.sentence_loss(tape, ids, masks, target_weights=weights)

    logs = sgd_train(model, student_cfg, train_sentences, valid_sentences,
                     loss_builder, progress=progress)
    return model, logs
