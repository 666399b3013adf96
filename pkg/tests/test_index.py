import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from temdp import (
    FingerprintMismatchError,
    IndexFormatError,
    MetricSpace,
    TruncatedStreamError,
    build_index,
    load_index,
    nearest_neighbor,
    range_query,
    save_index,
)
from temdp.index import MAGIC, index_from_bytes, index_to_bytes

from conftest import instances


def scan(space, w, gamma):
    """Hand-rolled reference: every (id, d) with d <= gamma, ordered by (d, id)."""
    out = [(i, space.distance(w, i)) for i in range(space.size)]
    return sorted([(i, d) for i, d in out if d <= gamma], key=lambda p: (p[1], p[0]))


@pytest.mark.parametrize("gamma, members, complement", [
    (2.0, [(0, 0.0), (1, 1.0)], 1),
    (0.0, [(0, 0.0)], 2),
    (10.0, [(0, 0.0), (1, 1.0), (2, 5.0)], 0),
])
def test_range_query_toy(toy_space, gamma, members, complement):
    cs = range_query(toy_space, 0, gamma)
    assert cs.members == members
    assert cs.complement_count == complement
    assert cs.members == scan(toy_space, 0, gamma)


def test_range_query_includes_ties_at_gamma(toy_space):
    cs = range_query(toy_space, 0, 1.0)
    assert (1, 1.0) in cs.members


def test_range_query_errors(toy_space):
    with pytest.raises(ValueError):
        range_query(toy_space, 0, -0.1)
    with pytest.raises(IndexError):
        range_query(toy_space, 3, 1.0)


@pytest.mark.parametrize("point, expected", [([0.9], 1), ([5.0], 2), ([0.5], 0), ([-100.0], 0)])
def test_nearest_neighbor_toy(toy_space, point, expected):
    assert nearest_neighbor(toy_space, point) == expected


def test_nearest_neighbor_dimension_mismatch(toy_space):
    with pytest.raises(ValueError):
        nearest_neighbor(toy_space, [0.0, 1.0])


def test_nearest_neighbor_tie_breaks_to_smallest_id():
    space = MetricSpace.from_arrays([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    assert nearest_neighbor(space, [0.0, 0.0]) == 0
    assert nearest_neighbor(space, [-0.5, -0.5]) == 2


def test_nearest_neighbor_matches_brute_force():
    rng = np.random.default_rng(3)
    space = MetricSpace.from_arrays(rng.standard_normal((300, 6)) + 50.0)
    for p in rng.standard_normal((200, 6)) + 50.0:
        d = [np.linalg.norm(space.vectors[i] - p) for i in range(space.size)]
        assert nearest_neighbor(space, p) == int(np.argmin(d))


def test_nearest_neighbor_of_each_embedding():
    rng = np.random.default_rng(4)
    space = MetricSpace.from_arrays(rng.standard_normal((200, 4)))
    for w in range(space.size):
        assert nearest_neighbor(space, space.vectors[w]) == w


def test_build_index_toy(toy_space):
    idx = build_index(toy_space, 2.0)
    assert len(idx) == 3
    for w in range(3):
        assert idx.candidates(w) == range_query(toy_space, w, 2.0)
    assert list(idx.sizes()) == [2, 2, 1]


def test_build_index_gamma_zero(toy_space):
    idx = build_index(toy_space, 0.0)
    for cs in idx:
        assert cs.members == [(cs.input, 0.0)]
        assert cs.complement_count == 2


def test_build_index_all_vectors_equal():
    space = MetricSpace.from_arrays(np.ones((6, 3)))
    for gamma in (0.0, 1.0):
        idx = build_index(space, gamma)
        assert all(cs.complement_count == 0 and len(cs) == 6 for cs in idx)


@pytest.mark.parametrize("method", ["brute", "partition"])
def test_build_index_agrees_with_range_query(method):
    for space in instances(10, seed=5, max_words=120, max_dim=6):
        d = space.pairwise()
        for gamma in (0.0, float(np.median(d)), float(d.max()), np.inf):
            idx = build_index(space, gamma, method=method, leaf_size=8)
            for w in range(space.size):
                assert idx.candidates(w) == range_query(space, w, gamma)


def test_partition_equals_brute_on_clusters():
    rng = np.random.default_rng(6)
    centres = rng.standard_normal((80, 10)) * 3
    x = np.repeat(centres, 25, axis=0) + 0.2 * rng.standard_normal((2000, 10))
    space = MetricSpace.from_arrays(x)
    for gamma in (0.5, 1.0, 4.0):
        a = build_index(space, gamma, method="brute")
        b = build_index(space, gamma, method="partition")
        c = build_index(space, gamma, method="partition", n_jobs=4, seed=9)
        assert a == b == c


def test_exact_boundary_membership():
    # distances that are exact in binary, placed right at gamma
    space = MetricSpace.from_arrays([[0.0, 0.0], [3.0, 4.0], [6.0, 8.0], [0.0, 5.0]])
    idx = build_index(space, 5.0, method="partition", leaf_size=1)
    assert idx.candidates(0).members == [(0, 0.0), (1, 5.0), (3, 5.0)]
    assert idx == build_index(space, 5.0, method="brute")


def test_unknown_method(toy_space):
    with pytest.raises(ValueError):
        build_index(toy_space, 1.0, method="annoy")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), g1=st.floats(0, 5), g2=st.floats(0, 5))
def test_range_query_monotone_and_self(seed, g1, g2):
    space = instances(1, seed)[0]
    lo, hi = sorted((g1, g2))
    for w in range(space.size):
        small, big = range_query(space, w, lo), range_query(space, w, hi)
        assert w in small.ids
        assert set(small.ids) <= set(big.ids)
        assert small.complement_count == space.size - len(small)
        assert len(set(big.ids)) == len(big)
        assert np.all(big.distances <= hi)


# -- persistence ---------------------------------------------------------------


def test_save_load_round_trip(toy_space):
    idx = build_index(toy_space, 2.0)
    buf = io.BytesIO()
    save_index(idx, buf)
    data = buf.getvalue()
    assert data.startswith(MAGIC)
    # magic + fingerprint + gamma + |W| + 3 counts + 5 (u32, f64) pairs
    assert len(data) == 7 + 32 + 8 + 8 + 3 * 4 + 5 * 12
    loaded = load_index(io.BytesIO(data), toy_space)
    assert loaded == idx


def test_round_trip_random():
    for space in instances(5, seed=8, max_words=80):
        idx = build_index(space, float(np.median(space.pairwise())))
        assert index_from_bytes(index_to_bytes(idx), space) == idx


def test_load_wrong_fingerprint(toy_space):
    data = index_to_bytes(build_index(toy_space, 2.0))
    other = MetricSpace.from_arrays([0.0, 1.0, 5.0], ["a", "b", "d"])
    with pytest.raises(FingerprintMismatchError):
        index_from_bytes(data, other)


def test_load_bad_magic(toy_space):
    data = index_to_bytes(build_index(toy_space, 2.0))
    with pytest.raises(IndexFormatError, match="magic"):
        index_from_bytes(b"TEMIDX2" + data[7:])


def test_load_corrupt_length_field(toy_space):
    data = bytearray(index_to_bytes(build_index(toy_space, 2.0)))
    first_count = 7 + 32 + 8 + 8
    data[first_count:first_count + 4] = (10**6).to_bytes(4, "little")
    with pytest.raises(TruncatedStreamError):
        index_from_bytes(bytes(data))


@pytest.mark.parametrize("cut", [3, 20, 55, 60, -1])
def test_load_truncated(toy_space, cut):
    data = index_to_bytes(build_index(toy_space, 2.0))
    with pytest.raises(IndexFormatError):
        index_from_bytes(data[:cut])


def test_load_trailing_bytes(toy_space):
    data = index_to_bytes(build_index(toy_space, 2.0))
    with pytest.raises(IndexFormatError, match="trailing"):
        index_from_bytes(data + b"\0")


def test_load_rejects_inconsistent_members(toy_space):
    data = bytearray(index_to_bytes(build_index(toy_space, 2.0)))
    # first member of word 0 is (0, 0.0); point it at id 7
    pos = 7 + 32 + 8 + 8 + 4
    data[pos:pos + 4] = (7).to_bytes(4, "little")
    with pytest.raises(IndexFormatError):
        index_from_bytes(bytes(data))
