"""Exact range and nearest-neighbour search, and the precomputed truncation index.

The truncation index stores, for every word, the words within ``gamma`` of it
(sorted by distance, then id). Once built, fetching a word's candidates is a
pair of array slices.

Two build strategies produce identical indexes:

* ``"brute"`` scans every query against the whole vocabulary in blocks.
* ``"partition"`` splits the vocabulary into small balls (centre + radius) and
  skips ball pairs that the triangle inequality proves are farther than
  ``gamma`` apart. Still exact; it only avoids work.

Both pre-filter with the ``|a|^2 + |b|^2 - 2ab`` expansion and a generous
slack, then recompute surviving distances with the same float64 arithmetic as
`range_query`, so membership at exactly ``gamma`` is decided identically.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .embeddings import MetricSpace, pair_distances, row_distances

MAGIC = b"TEMIDX1"
_HEADER = struct.Struct("<32sdQ")
_COUNT = struct.Struct("<I")
_PAIR = np.dtype([("id", "<u4"), ("dist", "<f8")])

# relative slack of the squared-distance pre-filter
_PREFILTER_SLACK = 1e-9
_MIN_LEAF = 4


class IndexFormatError(ValueError):
    """The byte stream is not a valid truncation index."""


class TruncatedStreamError(IndexFormatError):
    pass


class FingerprintMismatchError(IndexFormatError):
    pass


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """Words within ``gamma`` of ``input``, plus the size of the complement.

    ``ids`` and ``distances`` are parallel arrays ordered by distance, then id.
    """

    input: int
    gamma: float
    ids: np.ndarray
    distances: np.ndarray
    complement_count: int

    @property
    def members(self) -> list[tuple[int, float]]:
        return [(int(i), float(d)) for i, d in zip(self.ids, self.distances)]

    @property
    def vocab_size(self) -> int:
        return len(self.ids) + self.complement_count

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, CandidateSet):
            return NotImplemented
        return (self.input == other.input and self.gamma == other.gamma
                and self.complement_count == other.complement_count
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.distances, other.distances))

    def __repr__(self):
        return (f"CandidateSet(input={self.input}, gamma={self.gamma}, "
                f"members={self.members}, complement_count={self.complement_count})")


def _check_gamma(gamma):
    gamma = float(gamma)
    if not gamma >= 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    return gamma


def _sort_members(ids, dists):
    order = np.lexsort((ids, dists))
    return ids[order], dists[order]


def range_query(space: MetricSpace, w: int, gamma: float) -> CandidateSet:
    """Exact scan for every word ``i`` with ``d(w, i) <= gamma``."""
    gamma = _check_gamma(gamma)
    d = space.distances_from(w)
    ids = np.flatnonzero(d <= gamma)
    ids, dists = _sort_members(ids.astype(np.int64), d[ids])
    return CandidateSet(int(w), gamma, ids, dists, space.size - len(ids))


def nearest_neighbor(space: MetricSpace, point) -> int:
    """Id of the word closest to ``point``; ties go to the smallest id."""
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (space.dim,):
        raise ValueError(f"point has shape {point.shape}, expected ({space.dim},)")
    return int(nearest_neighbors(space, point[None, :])[0])


def nearest_neighbors(space: MetricSpace, points, block: int = 1024) -> np.ndarray:
    """Vectorised `nearest_neighbor` for a ``(k, dim)`` array of points."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != space.dim:
        raise ValueError(f"points have shape {points.shape}, expected (k, {space.dim})")
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    x = space.vectors
    mean = x.mean(axis=0)
    xc = x - mean
    xn = np.square(xc).sum(axis=1)
    out = np.empty(len(points), dtype=np.int64)
    for s in range(0, len(points), block):
        p = points[s:s + block]
        pc = p - mean
        pn = np.square(pc).sum(axis=1)
        sq = xn[None, :] - 2.0 * (pc @ xc.T) + pn[:, None]
        best = sq.min(axis=1)
        slack = _PREFILTER_SLACK * (pn + xn.max()) + 1e-300
        near = sq <= (best + slack)[:, None]
        for r in range(len(p)):
            cand = np.flatnonzero(near[r])
            if len(cand) == 1:
                out[s + r] = cand[0]
                continue
            d = row_distances(x, cand, p[r])
            # argmin returns the first minimum, and cand is ascending
            out[s + r] = cand[np.argmin(d)]
    return out


@dataclass(frozen=True, eq=False)
class TruncationIndex:
    """Per-word candidate sets for one ``gamma``, stored in CSR form.

    Word ``w``'s members are ``ids[offsets[w]:offsets[w + 1]]``.
    """

    gamma: float
    fingerprint: bytes
    offsets: np.ndarray
    ids: np.ndarray
    distances: np.ndarray
    kind: str = "euclidean"

    @property
    def vocab_size(self) -> int:
        return len(self.offsets) - 1

    def __len__(self):
        return self.vocab_size

    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def candidates(self, w: int) -> CandidateSet:
        if not 0 <= w < self.vocab_size:
            raise IndexError(f"word id {w} out of range for index of size {self.vocab_size}")
        lo, hi = self.offsets[w], self.offsets[w + 1]
        return CandidateSet(int(w), self.gamma, self.ids[lo:hi], self.distances[lo:hi],
                            self.vocab_size - int(hi - lo))

    def __iter__(self):
        return (self.candidates(w) for w in range(self.vocab_size))

    def matches(self, space: MetricSpace) -> bool:
        return self.fingerprint == space.fingerprint and self.kind == space.kind

    def __eq__(self, other):
        if not isinstance(other, TruncationIndex):
            return NotImplemented
        return (self.gamma == other.gamma and self.fingerprint == other.fingerprint
                and self.kind == other.kind
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.distances, other.distances))

    @classmethod
    def from_candidate_sets(cls, sets, fingerprint: bytes, kind="euclidean"):
        sets = list(sets)
        if not sets:
            raise ValueError("need at least one candidate set")
        gamma = sets[0].gamma
        offsets = np.zeros(len(sets) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(s) for s in sets])
        ids = np.concatenate([s.ids for s in sets]).astype(np.int64)
        dists = np.concatenate([s.distances for s in sets]).astype(np.float64)
        return cls(gamma, fingerprint, offsets, ids, dists, kind)


# -- building ---------------------------------------------------------------


class _Prefilter:
    """Centred copy of the embeddings for the cheap squared-distance filter."""

    def __init__(self, x):
        self.x = x
        self.mean = x.mean(axis=0)
        self.xc = np.asarray(x, dtype=np.float64) - self.mean
        self.norms = np.square(self.xc).sum(axis=1)

    def pairs(self, queries, cands, gamma):
        """Exact (query, member, distance) triples among ``queries x cands``."""
        if np.isinf(gamma):
            qi = np.repeat(queries, len(cands))
            ci = np.tile(cands, len(queries))
        else:
            qn = self.norms[queries]
            cn = self.norms[cands]
            sq = cn[None, :] - 2.0 * (self.xc[queries] @ self.xc[cands].T)
            sq += qn[:, None]
            slack = _PREFILTER_SLACK * (qn.max() + cn.max() + gamma * gamma) + 1e-300
            r, c = np.nonzero(sq <= gamma * gamma + slack)
            qi, ci = queries[r], cands[c]
        d = pair_distances(self.x, qi, ci)
        keep = d <= gamma
        return qi[keep], ci[keep], d[keep]


def _ball_partition(xc, leaf_size, max_radius, rng):
    """Top-down two-way splits.

    A ball is split while it holds more than ``leaf_size`` points, or while its
    radius exceeds ``max_radius`` and it still holds more than `_MIN_LEAF`.
    """
    leaves = []
    stack = [np.arange(len(xc))]
    while stack:
        idx = stack.pop()
        p = xc[idx]
        if len(idx) <= leaf_size:
            small = len(idx) <= _MIN_LEAF
            if small or np.square(p - p.mean(axis=0)).sum(axis=1).max() <= max_radius ** 2:
                leaves.append(idx)
                continue
        start = p[rng.integers(len(idx))]
        a = p[np.argmax(np.square(p - start).sum(axis=1))]
        b = p[np.argmax(np.square(p - a).sum(axis=1))]
        left = np.square(p - a).sum(axis=1) <= np.square(p - b).sum(axis=1)
        if left.any() and not left.all():
            # one Lloyd step tightens the two halves
            a, b = p[left].mean(axis=0), p[~left].mean(axis=0)
            left = np.square(p - a).sum(axis=1) <= np.square(p - b).sum(axis=1)
        if not left.any() or left.all():
            half = len(idx) // 2
            stack.extend([idx[:half], idx[half:]])
        else:
            stack.extend([idx[left], idx[~left]])
    return leaves


def _leaf_neighbours(xc, leaves, gamma):
    """For each leaf, the leaves that may hold points within ``gamma`` of it."""
    centers = np.stack([xc[l].mean(axis=0) for l in leaves])
    radii = np.array([row_distances(xc, l, c).max() for l, c in zip(leaves, centers)])
    radii = radii * (1 + 1e-9) + 1e-12 * (1 + np.abs(xc).max())
    cn = np.square(centers).sum(axis=1)
    out = []
    block = max(1, 2 ** 22 // len(leaves))
    for s in range(0, len(leaves), block):
        sq = cn[s:s + block, None] + cn[None, :] - 2.0 * (centers[s:s + block] @ centers.T)
        # lower bound on the true squared centre distance
        sq -= _PREFILTER_SLACK * (cn[s:s + block, None] + cn[None, :]) + 1e-300
        lower = np.sqrt(np.maximum(sq, 0.0))
        gap = lower - radii[s:s + block, None] - radii[None, :]
        near = gap <= gamma * (1 + 1e-12)
        out.extend(np.flatnonzero(row) for row in near)
    return out


def _assemble(n, chunks, gamma, fingerprint, kind):
    rows = np.concatenate([c[0] for c in chunks])
    cols = np.concatenate([c[1] for c in chunks])
    dists = np.concatenate([c[2] for c in chunks])
    order = np.lexsort((cols, dists, rows))
    rows, cols, dists = rows[order], cols[order], dists[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(np.bincount(rows, minlength=n))
    return TruncationIndex(gamma, fingerprint, offsets, cols.astype(np.int64), dists, kind)


def build_index(space: MetricSpace, gamma: float, method: str = "auto",
                n_jobs: int = 1, leaf_size: int = 32, seed: int = 0) -> TruncationIndex:
    """Precompute candidate sets for every word.

    Args:
      space: the metric space.
      gamma: truncation threshold, ``>= 0`` (``inf`` keeps everything).
      method: ``"brute"``, ``"partition"`` or ``"auto"`` (partition for
        vocabularies above a few thousand words).
      n_jobs: worker threads; the result does not depend on it.
      leaf_size: ball size for the partition method.
      seed: seeds the partition split points; the result does not depend on it.
    """
    gamma = _check_gamma(gamma)
    if method == "auto":
        method = "partition" if space.size > 4096 else "brute"
    pf = _Prefilter(space.vectors)
    n = space.size
    everything = np.arange(n)

    if method == "brute":
        block = max(1, 2 ** 22 // n)
        tasks = [(everything[s:s + block], everything) for s in range(0, n, block)]
    elif method == "partition":
        leaves = _ball_partition(pf.xc, leaf_size, gamma / 2, np.random.default_rng(seed))
        neighbours = _leaf_neighbours(pf.xc, leaves, gamma)
        tasks = [(leaf, np.sort(np.concatenate([leaves[j] for j in nb])))
                 for leaf, nb in zip(leaves, neighbours)]
    else:
        raise ValueError(f"unknown build method {method!r}")

    def run(task):
        return pf.pairs(task[0], task[1], gamma)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            chunks = list(pool.map(run, tasks))
    else:
        chunks = [run(t) for t in tasks]
    return _assemble(n, chunks, gamma, space.fingerprint, space.kind)


# -- persistence ------------------------------------------------------------


def save_index(index: TruncationIndex, sink: BinaryIO) -> None:
    """Write ``index`` in the little-endian ``TEMIDX1`` layout."""
    sink.write(MAGIC)
    sink.write(_HEADER.pack(index.fingerprint, index.gamma, index.vocab_size))
    pairs = np.empty(len(index.ids), dtype=_PAIR)
    pairs["id"] = index.ids
    pairs["dist"] = index.distances
    for w in range(index.vocab_size):
        lo, hi = index.offsets[w], index.offsets[w + 1]
        sink.write(_COUNT.pack(hi - lo))
        sink.write(pairs[lo:hi].tobytes())


def load_index(source: BinaryIO, space: MetricSpace | None = None) -> TruncationIndex:
    """Read an index written by `save_index`.

    If ``space`` is given, the stored vocabulary fingerprint must match it.

    Raises:
      IndexFormatError: bad magic, inconsistent contents or trailing bytes.
      TruncatedStreamError: the stream ends before the declared data.
      FingerprintMismatchError: the index was built for another vocabulary.
    """
    data = source.read()
    if data[:len(MAGIC)] != MAGIC:
        raise IndexFormatError("not a TEMIDX1 stream (bad magic or version)")
    pos = len(MAGIC)
    if len(data) < pos + _HEADER.size:
        raise TruncatedStreamError("stream ends inside the header")
    fingerprint, gamma, n = _HEADER.unpack_from(data, pos)
    pos += _HEADER.size
    if space is not None and fingerprint != space.fingerprint:
        raise FingerprintMismatchError("index was built for a different vocabulary")
    if not gamma >= 0:
        raise IndexFormatError(f"invalid gamma {gamma}")
    if n < 1 or n > (len(data) - pos) // _COUNT.size:
        raise TruncatedStreamError(f"declared vocabulary size {n} exceeds stream")

    offsets = np.zeros(n + 1, dtype=np.int64)
    starts = np.empty(n, dtype=np.int64)
    for w in range(n):
        if pos + _COUNT.size > len(data):
            raise TruncatedStreamError(f"stream ends before entry {w}")
        (count,) = _COUNT.unpack_from(data, pos)
        pos += _COUNT.size
        starts[w] = pos
        pos += count * _PAIR.itemsize
        if pos > len(data):
            raise TruncatedStreamError(f"entry {w} declares {count} members past end of stream")
        offsets[w + 1] = offsets[w] + count
    if pos != len(data):
        raise IndexFormatError(f"{len(data) - pos} trailing bytes after last entry")

    pairs = np.concatenate([
        np.frombuffer(data, dtype=_PAIR, count=int(offsets[w + 1] - offsets[w]), offset=int(starts[w]))
        for w in range(n)]) if offsets[-1] else np.empty(0, dtype=_PAIR)
    index = TruncationIndex(float(gamma), fingerprint, offsets,
                            pairs["id"].astype(np.int64), pairs["dist"].astype(np.float64))
    _validate(index)
    if space is not None and space.size != n:
        raise FingerprintMismatchError("index size does not match the vocabulary")
    return index


def _validate(index: TruncationIndex):
    n = index.vocab_size
    ids, d = index.ids, index.distances
    if len(ids) and (ids.max() >= n or not np.all(np.isfinite(d)) or d.min() < 0
                     or d.max() > index.gamma):
        raise IndexFormatError("member ids or distances out of range")
    rows = np.repeat(np.arange(n), index.sizes())
    # per row: strictly increasing in (distance, id)
    same_row = rows[1:] == rows[:-1]
    ordered = (d[1:] > d[:-1]) | ((d[1:] == d[:-1]) & (ids[1:] > ids[:-1]))
    if np.any(same_row & ~ordered):
        raise IndexFormatError("candidate lists are not sorted or contain duplicates")
    has_self = np.zeros(n, dtype=bool)
    has_self[rows[ids == rows]] = True
    if not has_self.all():
        raise IndexFormatError("some word is missing from its own candidate list")


def index_to_bytes(index: TruncationIndex) -> bytes:
    buf = io.BytesIO()
    save_index(index, buf)
    return buf.getvalue()


def index_from_bytes(data: bytes, space: MetricSpace | None = None) -> TruncationIndex:
    return load_index(io.BytesIO(data), space)
