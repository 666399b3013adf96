"""Word domain, embedding vectors and the metric over them."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

METRICS = ("euclidean",)


class EmbeddingFormatError(ValueError):
    """Raised when an embedding text file cannot be parsed."""


class DuplicateWordWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Ordered, duplicate-free list of words with a dense 0-based id map."""

    words: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        words = tuple(self.words)
        if not words:
            raise ValueError("vocabulary must contain at least one word")
        index = {w: i for i, w in enumerate(words)}
        if len(index) != len(words):
            raise ValueError("vocabulary contains duplicate words")
        object.__setattr__(self, "words", words)
        object.__setattr__(self, "index", index)

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def __iter__(self):
        return iter(self.words)

    def id_of(self, word: str) -> int:
        return self.index[word]

    def word_of(self, i: int) -> str:
        return self.words[i]


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Row ``i`` is the embedding of word ``i``."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D array, got shape {v.shape}")
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding vectors contain NaN or Inf")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]


def row_distances(x: np.ndarray, rows: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Euclidean distances from ``center`` to ``x[rows]`` in float64.

    Every exact distance in the package goes through here so that range
    queries, index builds and single-pair lookups agree bit for bit.
    """
    diff = x[rows].astype(np.float64, copy=False) - np.asarray(center, dtype=np.float64)
    return np.sqrt(np.square(diff).sum(axis=-1))


def pair_distances(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise distances ``d(x[a[k]], x[b[k]])``; same arithmetic as `row_distances`."""
    diff = x[b].astype(np.float64, copy=False) - x[a].astype(np.float64, copy=False)
    return np.sqrt(np.square(diff).sum(axis=-1))


class MetricSpace:
    """A vocabulary, its embeddings and a distance metric.

    Immutable after construction. Only the Euclidean metric ships; ``kind`` is
    the extension point for others.
    """

    def __init__(self, vocab: Vocabulary, embeddings: EmbeddingMatrix | np.ndarray,
                 kind: str = "euclidean"):
        if kind not in METRICS:
            raise ValueError(f"unsupported metric {kind!r}; available: {METRICS}")
        if not isinstance(embeddings, EmbeddingMatrix):
            embeddings = EmbeddingMatrix(embeddings)
        if len(embeddings) != len(vocab):
            raise ValueError(
                f"{len(embeddings)} embedding rows for {len(vocab)} words")
        self.vocab = vocab
        self.embeddings = embeddings
        self.kind = kind
        self._fingerprint = None

    @classmethod
    def from_arrays(cls, vectors, words: Sequence[str] | None = None) -> MetricSpace:
        """Convenience constructor; words default to ``w0, w1, ...``."""
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim == 1:
            vectors = vectors[:, None]
        if words is None:
            words = [f"w{i}" for i in range(len(vectors))]
        return cls(Vocabulary(tuple(words)), EmbeddingMatrix(vectors))

    @property
    def size(self) -> int:
        return len(self.vocab)

    @property
    def dim(self) -> int:
        return self.embeddings.dim

    @property
    def vectors(self) -> np.ndarray:
        return self.embeddings.vectors

    @property
    def fingerprint(self) -> bytes:
        if self._fingerprint is None:
            self._fingerprint = vocabulary_fingerprint(self.vocab, self.dim)
        return self._fingerprint

    def _check_id(self, i):
        if not 0 <= i < self.size:
            raise IndexError(f"word id {i} out of range for vocabulary of size {self.size}")

    def distance(self, a: int, b: int) -> float:
        self._check_id(a)
        self._check_id(b)
        return float(row_distances(self.vectors, np.array([b]), self.vectors[a])[0])

    def distances_from(self, a: int) -> np.ndarray:
        """Distances from word ``a`` to every word, indexed by id."""
        self._check_id(a)
        return row_distances(self.vectors, slice(None), self.vectors[a])

    def pairwise(self) -> np.ndarray:
        """Full ``|W| x |W|`` distance matrix. Meant for small vocabularies."""
        return np.stack([self.distances_from(a) for a in range(self.size)])

    def diameter(self) -> float:
        return float(self.pairwise().max())


def distance(space: MetricSpace, a: int, b: int) -> float:
    return space.distance(a, b)


def vocabulary_fingerprint(vocab: Vocabulary | Iterable[str], dim: int) -> bytes:
    """SHA-256 over the dimension and the ordered word list."""
    h = hashlib.sha256()
    h.update(int(dim).to_bytes(8, "little"))
    for word in vocab:
        data = word.encode("utf-8")
        h.update(len(data).to_bytes(8, "little"))
        h.update(data)
    return h.digest()


def load_embeddings(source: TextIO | Iterable[str], expected_dim: int | None = None,
                    skip_header: bool = False, dtype=np.float64):
    """Parse GloVe-format text (``word f1 f2 ... fn`` per line).

    Args:
      source: open text stream or any iterable of lines.
      expected_dim: if given, every vector must have this many components.
      skip_header: drop the first non-empty line (word2vec ``count dim`` header).
      dtype: storage dtype for the matrix. Distances are always float64.

    Returns:
      ``(Vocabulary, EmbeddingMatrix)`` in file order. Repeated words keep
      their first vector; each repeat emits a `DuplicateWordWarning`.

    Raises:
      EmbeddingFormatError: on empty input, unparsable numbers, inconsistent
        dimensions or a mismatch with ``expected_dim``.
    """
    if expected_dim is not None and expected_dim < 1:
        raise ValueError("expected_dim must be positive")
    words: list[str] = []
    rows: list[list[float]] = []
    seen: set[str] = set()
    dim = expected_dim
    header_pending = skip_header
    for lineno, line in enumerate(source, start=1):
        parts = line.split()
        if not parts:
            continue
        if header_pending:
            header_pending = False
            continue
        word, values = parts[0], parts[1:]
        if not values:
            raise EmbeddingFormatError(f"line {lineno}: word {word!r} has no vector")
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            what = "expected_dim" if expected_dim is not None else "previous lines"
            raise EmbeddingFormatError(
                f"line {lineno}: {len(values)} components, {what} say {dim}")
        try:
            vec = [float(v) for v in values]
        except ValueError as e:
            raise EmbeddingFormatError(f"line {lineno}: {e}") from None
        if not all(math.isfinite(v) for v in vec):
            raise EmbeddingFormatError(f"line {lineno}: non-finite component")
        if word in seen:
            warnings.warn(f"line {lineno}: duplicate word {word!r} ignored",
                          DuplicateWordWarning, stacklevel=2)
            continue
        seen.add(word)
        words.append(word)
        rows.append(vec)
    if not words:
        raise EmbeddingFormatError("no embeddings found in input")
    return Vocabulary(tuple(words)), EmbeddingMatrix(np.array(rows, dtype=dtype))


def load_space(path, expected_dim=None, skip_header=False) -> MetricSpace:
    with open(path, encoding="utf-8") as f:
        vocab, emb = load_embeddings(f, expected_dim=expected_dim, skip_header=skip_header)
    return MetricSpace(vocab, emb)


def dump_embeddings(vocab: Vocabulary, embeddings: EmbeddingMatrix, sink: TextIO) -> None:
    """Write GloVe text; floats use ``repr`` so a reload is lossless."""
    for word, row in zip(vocab.words, embeddings.vectors):
        sink.write(word + " " + " ".join(repr(float(v)) for v in row) + "\n")
