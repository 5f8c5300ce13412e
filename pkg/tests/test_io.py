import numpy as np
import pytest

from treelm.checkpoint import (atomic_write, load_checkpoint,
                               save_checkpoint)
from treelm.corpusio import (read_corpus, read_pairs, read_treebank,
                             write_corpus, write_pairs, write_treebank)
from treelm.grammar import MinimalPair
from treelm.trees import parse_bracketed


def test_corpus_round_trip(tmp_path):
    sentences = [["a", "b"], ["c"]]
    path = tmp_path / "corpus.txt"
    write_corpus(path, sentences)
    assert read_corpus(path) == sentences
    assert path.read_text() == "a b\nc\n"


def test_corpus_skips_blank_lines(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("a b\n\n  \nc\n")
    assert read_corpus(path) == [["a", "b"], ["c"]]


def test_treebank_round_trip(tmp_path):
    trees = [parse_bracketed("(S (NP a) b)"), parse_bracketed("(S c)")]
    path = tmp_path / "trees.txt"
    write_treebank(path, trees)
    assert read_treebank(path) == trees


def test_treebank_error_carries_location(tmp_path):
    path = tmp_path / "trees.txt"
    path.write_text("(S a)\n(S (NP b)\n")
    with pytest.raises(ValueError, match=r"trees\.txt:2"):
        read_treebank(path)


def test_pairs_round_trip(tmp_path):
    pairs = [MinimalPair("simple", ("the", "hawk", "is"),
                         ("the", "hawk", "are"))]
    path = tmp_path / "pairs.tsv"
    write_pairs(path, pairs)
    assert read_pairs(path) == pairs


def test_pairs_rejects_bad_field_count(tmp_path):
    path = tmp_path / "pairs.tsv"
    path.write_text("simple\tonly two fields\n")
    with pytest.raises(ValueError, match="3 tab-separated"):
        read_pairs(path)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4)}
    hyper = {"model": "x", "hidden_size": "4"}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, 7, hyper, "deadbeef")
    loaded, seed, hyper2, vocab_hash = load_checkpoint(path)
    assert seed == 7 and hyper2 == hyper and vocab_hash == "deadbeef"
    for name in params:
        assert np.array_equal(loaded[name], params[name])
    path2 = tmp_path / "m2.ckpt"
    save_checkpoint(path2, loaded, seed, hyper2, vocab_hash)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)


def test_atomic_write_leaves_no_temp_on_error(tmp_path):
    path = tmp_path / "out.bin"

    def writer(fh):
        fh.write(b"partial")
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        atomic_write(path, writer)
    assert not path.exists()
    assert list(tmp_path.iterdir()) == []
