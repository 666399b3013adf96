import io
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from temdp import (
    EmbeddingFormatError,
    EmbeddingMatrix,
    MetricSpace,
    Vocabulary,
    distance,
    dump_embeddings,
    load_embeddings,
)
from temdp.embeddings import DuplicateWordWarning, vocabulary_fingerprint


def parse(text, **kw):
    return load_embeddings(io.StringIO(text), **kw)


def test_load_toy():
    vocab, emb = parse("a 0.0\nb 1.0\nc 5.0\n")
    assert vocab.words == ("a", "b", "c")
    assert emb.dim == 1
    assert len(vocab) == 3
    np.testing.assert_array_equal(emb.vectors[vocab.id_of("a")], [0.0])


def test_load_300_dimensions():
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((4, 300))
    text = "".join(f"w{i} " + " ".join(repr(float(v)) for v in r) + "\n" for i, r in enumerate(rows))
    vocab, emb = parse(text, expected_dim=300)
    assert emb.dim == 300
    np.testing.assert_array_equal(emb.vectors, rows)


@pytest.mark.parametrize("text, kw", [
    ("a 0.0 1.0\nb 1.0 2.0 3.0\n", {}),
    ("a 0.0 zero\n", {}),
    ("", {}),
    ("\n\n  \n", {}),
    ("a 0.0 1.0\n", {"expected_dim": 3}),
    ("a\n", {}),
    ("a nan\n", {}),
])
def test_load_rejects(text, kw):
    with pytest.raises(EmbeddingFormatError):
        parse(text, **kw)


def test_duplicates_warn_first_wins():
    with pytest.warns(DuplicateWordWarning, match="'a'"):
        vocab, emb = parse("a 1\nb 2\na 3\n")
    assert vocab.words == ("a", "b")
    assert emb.vectors[0, 0] == 1.0


def test_word2vec_header():
    vocab, emb = parse("2 3\nx 1 2 3\ny 4 5 6\n", skip_header=True)
    assert vocab.words == ("x", "y")
    assert emb.dim == 3


def test_blank_lines_ignored():
    vocab, _ = parse("\na 1\n\nb 2\n")
    assert len(vocab) == 2


def test_vocabulary_invariants():
    with pytest.raises(ValueError):
        Vocabulary(())
    with pytest.raises(ValueError):
        Vocabulary(("a", "a"))
    v = Vocabulary(("x", "y", "z"))
    assert [v.id_of(w) for w in v] == [0, 1, 2]
    assert v.word_of(2) == "z"


def test_embedding_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        EmbeddingMatrix(np.array([[0.0], [np.inf]]))
    with pytest.raises(ValueError):
        MetricSpace(Vocabulary(("a",)), EmbeddingMatrix(np.zeros((2, 1))))


def test_toy_distances(toy_space):
    a, b, c = range(3)
    assert distance(toy_space, a, a) == 0.0
    assert distance(toy_space, a, b) == 1.0
    assert distance(toy_space, a, c) == 5.0
    with pytest.raises(IndexError):
        distance(toy_space, 0, 3)


def test_distances_use_float64_for_float32_storage():
    vocab, emb = parse("a 0.1\nb 0.3\n", dtype=np.float32)
    space = MetricSpace(vocab, emb)
    assert emb.vectors.dtype == np.float32
    expected = float(np.float64(np.float32(0.3)) - np.float64(np.float32(0.1)))
    assert space.distance(0, 1) == expected


def test_metric_axioms_random_triples():
    rng = np.random.default_rng(1)
    space = MetricSpace.from_arrays(rng.standard_normal((60, 7)) * 10)
    t = rng.integers(0, 60, size=(1000, 3))
    for a, b, c in t:
        ab, bc, ac = space.distance(a, b), space.distance(b, c), space.distance(a, c)
        assert ac <= ab + bc + 1e-9
        assert abs(ab - space.distance(b, a)) <= 1e-12
        assert ab >= 0


def test_unknown_metric():
    with pytest.raises(ValueError):
        MetricSpace(Vocabulary(("a",)), np.zeros((1, 1)), kind="hyperbolic")


def test_fingerprint_depends_on_order_and_dim():
    v1, v2 = Vocabulary(("a", "b")), Vocabulary(("b", "a"))
    assert vocabulary_fingerprint(v1, 2) != vocabulary_fingerprint(v2, 2)
    assert vocabulary_fingerprint(v1, 2) != vocabulary_fingerprint(v1, 3)
    assert len(vocabulary_fingerprint(v1, 2)) == 32


words = st.lists(st.text(alphabet=st.characters(blacklist_categories=("Zs", "Cc", "Zl", "Zp"),
                                                blacklist_characters="\x85\x1c\x1d\x1e\x1f"),
                         min_size=1, max_size=8),
                 min_size=1, max_size=20, unique=True)


@settings(max_examples=50, deadline=None)
@given(words=words, seed=st.integers(0, 2**32 - 1))
def test_dump_load_round_trip(words, seed):
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(tuple(words))
    emb = EmbeddingMatrix(rng.standard_normal((len(words), 3)) * 1e3)
    buf = io.StringIO()
    dump_embeddings(vocab, emb, buf)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        vocab2, emb2 = load_embeddings(io.StringIO(buf.getvalue()))
    assert vocab2.words == vocab.words
    np.testing.assert_array_equal(emb2.vectors, emb.vectors)
