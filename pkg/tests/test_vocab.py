import numpy as np
import pytest

from rexup.errors import DimensionError, ParseError
from rexup.vocab import PAD, UNK, Vocabulary, build_vocab, load_or_init_embeddings


def test_build_vocab_examples():
    v = build_vocab(["a b", "b c"])
    assert v.index == {PAD: 0, UNK: 1, "a": 2, "b": 3, "c": 4}
    assert build_vocab([]).tokens == [PAD, UNK]
    assert build_vocab(["b c", "a b"]).tokens == v.tokens
    assert build_vocab([["B", "a"]]).tokens == [PAD, UNK, "a", "b"]


def test_lookup_and_json_round_trip():
    v = build_vocab(["red dog"])
    assert v.lookup("dog") == v.index["dog"]
    assert v.lookup("zebra") == 1
    assert v.decode(v.encode(["red", "dog"])) == ["red", "dog"]
    assert Vocabulary.from_json(v.to_json()).tokens == v.tokens


def test_embedding_full_width_and_seeded_init():
    v = build_vocab(["a b c"])
    t = load_or_init_embeddings(v, 300, seed=3)
    assert t.matrix.shape == (5, 300)
    assert np.array_equal(t.matrix, load_or_init_embeddings(v, 300, seed=3).matrix)
    assert np.all(t.matrix[0] == 0.0)


def test_file_vectors_override(tmp_path):
    f = tmp_path / "vec.txt"
    f.write_text("dog 1.0 0.0\nunused 3 3\n")
    v = build_vocab(["dog cat"])
    t = load_or_init_embeddings(v, 2, source=f)
    assert t.row(v, "dog").tolist() == [1.0, 0.0]
    assert np.array_equal(t.row(v, "zebra"), t.matrix[1])
    assert np.all(t.matrix[0] == 0.0)


def test_file_errors_name_the_line(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_text("dog 1.0 0.0\ncat 1.0 x\n")
    with pytest.raises(ParseError, match="line 2"):
        load_or_init_embeddings(build_vocab(["dog"]), 2, source=f)
    f.write_text("dog 1.0 0.0\ncat 1.0\n")
    with pytest.raises(DimensionError, match="line 2"):
        load_or_init_embeddings(build_vocab(["dog"]), 2, source=f)
