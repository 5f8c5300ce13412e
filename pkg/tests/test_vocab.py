import pytest

from treelm.vocab import EOS, UNK, Vocabulary, build_vocab


def test_min_count_filters():
    vocab = build_vocab([["a", "a", "b"]], min_count=2)
    assert "a" in vocab and "b" not in vocab
    assert vocab.decode(vocab.encode("b")) == UNK


def test_min_count_one_keeps_everything():
    sentences = [["x", "y"], ["z"]]
    vocab = build_vocab(sentences, min_count=1)
    for sent in sentences:
        for word in sent:
            assert vocab.decode(vocab.encode(word)) == word


def test_reserved_ids():
    vocab = build_vocab([["a"]])
    assert vocab.decode(vocab.unk_id) == UNK
    assert vocab.decode(vocab.eos_id) == EOS
    assert vocab.id_to_word.count(UNK) == 1
    assert vocab.id_to_word.count(EOS) == 1


def test_id_order_by_count_then_lexicographic():
    vocab = build_vocab([["b", "b", "c", "a", "a", "a"], ["c", "b"]])
    # a:3, b:3, c:2 -> ties by word
    assert vocab.id_to_word[2:] == ["a", "b", "c"]


def test_id_order_stable_across_runs():
    sentences = [["w%d" % (i % 17)] * (i % 5 + 1) for i in range(50)]
    first = build_vocab(sentences)
    second = build_vocab(list(sentences))
    assert first.id_to_word == second.id_to_word
    assert first.content_hash() == second.content_hash()


def test_empty_corpus_fails():
    with pytest.raises(ValueError, match="empty"):
        build_vocab([])


def test_save_load_round_trip(tmp_path):
    vocab = build_vocab([["a", "b", "b"]])
    path = tmp_path / "vocab.tsv"
    vocab.save(path)
    loaded = Vocabulary.load(path)
    assert loaded.id_to_word == vocab.id_to_word
    assert loaded.content_hash() == vocab.content_hash()
    assert loaded.counts == vocab.counts
