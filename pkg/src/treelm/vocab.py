"""Vocabulary with reserved UNK/EOS ids and a content hash for compatibility checks."""

from __future__ import annotations

import hashlib
from collections import Counter

UNK = "<unk>"
EOS = "</s>"


class Vocabulary:
    def __init__(self, words, counts=None):
        """words: in-vocab types in final id order, excluding UNK/EOS."""
        self.id_to_word = [UNK, EOS] + list(words)
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise ValueError("duplicate word types in vocabulary")
        self.counts = dict(counts or {})

    @property
    def unk_id(self):
        return 0

    @property
    def eos_id(self):
        return 1

    def __len__(self):
        return len(self.id_to_word)

    def encode(self, word):
        return self.word_to_id.get(word, 0)

    def decode(self, idx):
        return self.id_to_word[idx]

    def encode_sentence(self, tokens):
        return [self.encode(t) for t in tokens]

    def __contains__(self, word):
        return word in self.word_to_id

    def content_hash(self):
        h = hashlib.sha256()
        for w in self.id_to_word:
            h.update(w.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()

    def save(self, path):
        from .checkpoint import atomic_write

        def writer(fh):
            for w in self.id_to_word[2:]:
                count = self.counts.get(w, 0)
                fh.write(f"{w}\t{count}\n".encode("utf-8"))

        atomic_write(path, writer)

    @staticmethod
    def load(path):
        words, counts = [], {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                word, _, count = line.partition("\t")
                words.append(word)
                counts[word] = int(count) if count else 0
        return Vocabulary(words, counts)


def build_vocab(sentences, min_count=1):
    """Keep types with count >= min_count; id order by descending count, then lexicographic."""
    counts = Counter()
    n_sentences = 0
    for sent in sentences:
        n_sentences += 1
        counts.update(sent)
    if n_sentences == 0 or not counts:
        raise ValueError("empty corpus")
    counts.pop(UNK, None)
    counts.pop(EOS, None)
    kept = [w for w, c in counts.items() if c >= min_count]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocabulary(kept, {w: counts[w] for w in kept})
