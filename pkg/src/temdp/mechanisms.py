"""Word privatisation mechanisms.

`TEM` selects a replacement word with the exponential mechanism, restricted to
the words within ``gamma`` of the input. Every word farther away is folded
into a single "bottom" candidate; if that candidate wins, a uniformly random
far word is returned. Selection uses the Gumbel-max trick: add Gumbel noise of
scale ``2 / epsilon`` to every score and take the argmax.

`Madlib` is the noise-and-snap baseline: perturb the input's embedding with
noise of density proportional to ``exp(-epsilon * |z|)`` and return the
nearest vocabulary word.

Both satisfy ``Pr[M(w) = y] <= exp(epsilon * d(w, w')) * Pr[M(w') = y]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .embeddings import MetricSpace, Vocabulary
from .index import CandidateSet, TruncationIndex, build_index, nearest_neighbors

_TINY = np.finfo(np.float64).tiny

OOV_POLICIES = ("error", "drop", "passthrough")


class OOVError(LookupError):
    """A token is not in the vocabulary and the policy is ``"error"``."""

    def __init__(self, token):
        super().__init__(f"out-of-vocabulary token {token!r}")
        self.token = token


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    gamma: float
    beta: float | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.beta is not None and not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")

    @classmethod
    def calibrated(cls, epsilon: float, beta: float, vocab_size: int) -> PrivacyParams:
        return cls(epsilon, calibrate_gamma(epsilon, beta, vocab_size), beta)

    @property
    def noise_scale(self) -> float:
        return 2.0 / self.epsilon


def calibrate_gamma(epsilon: float, beta: float, vocab_size: int) -> float:
    """Smallest ``gamma`` for which TEM stays within ``gamma`` w.p. ``1 - beta``.

    ``gamma = (2 / epsilon) * ln((1 - beta) * (|W| - 1) / beta)``, clamped at 0.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < beta < 1:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if vocab_size < 2:
        raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
    return max(0.0, (2.0 / epsilon) * math.log((1.0 - beta) * (vocab_size - 1) / beta))


# -- randomness ---------------------------------------------------------------


def random_source(seed: int, *stream: int) -> np.random.Generator:
    """Generator for ``seed``; extra integers select an independent substream.

    ``random_source(seed, doc)`` gives each document its own stream, so results
    do not depend on how documents are scheduled across threads.
    """
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))))


def gumbel_from_uniform(u, scale: float):
    """Inverse-CDF transform ``-scale * ln(-ln(u))``."""
    return -scale * np.log(-np.log(u))


def sample_gumbel(rng: np.random.Generator, scale: float, size=None):
    """Gumbel(0, ``scale``) draws from uniforms in the open interval (0, 1)."""
    if not scale > 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    u = np.maximum(rng.random(size), _TINY)
    return gumbel_from_uniform(u, scale)


def sample_exp_ball_noise(rng: np.random.Generator, dim: int, epsilon: float, size=None):
    """Noise with density proportional to ``exp(-epsilon * |z|)`` in ``dim`` dimensions.

    Uniform direction (normalised Gaussian) times a Gamma(``dim``, rate
    ``epsilon``) radius, which is the radial law of that density.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    k = 1 if size is None else int(size)
    g = rng.standard_normal((k, dim))
    norms = np.sqrt(np.square(g).sum(axis=1))
    # a zero Gaussian vector has probability zero; redraw rather than divide by it
    while np.any(norms == 0):
        bad = norms == 0
        g[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.sqrt(np.square(g).sum(axis=1))
    radius = rng.gamma(shape=dim, scale=1.0 / epsilon, size=k)
    z = g * (radius / norms)[:, None]
    return z[0] if size is None else z


# -- TEM ------------------------------------------------------------------------


def _kth_outside(members_sorted: np.ndarray, k: int) -> int:
    """The ``k``-th (0-based) integer not in ``members_sorted``."""
    before = members_sorted - np.arange(len(members_sorted))
    return int(k + np.searchsorted(before, k, side="right"))


def _tem_select(offsets, ids, dists, vocab_size, params: PrivacyParams,
                rng: np.random.Generator) -> np.ndarray:
    """Gumbel-max selection for a batch of inputs given in CSR form.

    Each input gets its members plus one bottom slot. The bottom slot always
    consumes a noise draw (its score is ``-inf`` when the complement is empty)
    so the random stream depends only on the candidate-list sizes.
    """
    layout = _TemLayout(offsets, ids, dists, vocab_size, params)
    winner, fell = layout.select(np.maximum(rng.random(layout.total), _TINY))
    if len(fell):
        winner[fell] = layout.far_words(fell, rng.integers(0, layout.complement[fell]))
    return winner


class _TemLayout:
    """Scores for every (input, slot) pair of a CSR batch, bottom slot last."""

    def __init__(self, offsets, ids, dists, vocab_size, params):
        self.offsets, self.ids, self.vocab_size = offsets, ids, vocab_size
        self.params = params
        sizes = np.diff(offsets)
        k = len(sizes)
        self.complement = vocab_size - sizes
        self.slots = sizes + 1
        self.starts = np.zeros(k, dtype=np.int64)
        np.cumsum(self.slots[:-1], out=self.starts[1:])
        self.total = int(self.slots.sum())

        member_slot = np.ones(self.total, dtype=bool)
        member_slot[self.starts + sizes] = False
        self.scores = np.empty(self.total)
        self.slot_ids = np.empty(self.total, dtype=np.int64)
        member_src = _ranges(offsets[:-1], sizes)
        self.scores[member_slot] = -dists[member_src]
        self.slot_ids[member_slot] = ids[member_src]
        with np.errstate(divide="ignore"):
            bottom = -params.gamma + 2.0 * np.log(self.complement) / params.epsilon
        self.scores[~member_slot] = np.where(self.complement > 0, bottom, -np.inf)
        # the bottom slot loses exact ties against real words
        self.slot_ids[~member_slot] = vocab_size

    def select(self, uniforms):
        """Winners given one uniform per slot; also returns the inputs that drew bottom."""
        if self.total == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        noisy = self.scores + gumbel_from_uniform(uniforms, self.params.noise_scale)
        best = np.maximum.reduceat(noisy, self.starts)
        is_best = noisy == np.repeat(best, self.slots)
        winner = np.minimum.reduceat(np.where(is_best, self.slot_ids, self.vocab_size + 1),
                                     self.starts)
        return winner, np.flatnonzero(winner == self.vocab_size)

    def far_words(self, rows, picks):
        return _kth_outside_batch(self.offsets, self.ids, rows, picks, self.vocab_size)


def _kth_outside_batch(offsets, ids, rows, picks, vocab_size):
    """Vectorised `_kth_outside` for several CSR rows at once."""
    lengths = offsets[rows + 1] - offsets[rows]
    seg = np.repeat(np.arange(len(rows)), lengths)
    members = ids[_ranges(offsets[rows], lengths)]
    members = members[np.lexsort((members, seg))]
    heads = np.zeros(len(rows), dtype=np.int64)
    np.cumsum(lengths[:-1], out=heads[1:])
    rank = np.arange(len(members)) - np.repeat(heads, lengths)
    # (row, members-below-or-at) keys are globally sorted, so one searchsorted serves all rows
    stride = vocab_size + 1
    keys = seg * stride + (members - rank)
    below = np.searchsorted(keys, np.arange(len(rows)) * stride + picks, side="right") - heads
    return picks + below


def _ranges(starts, lengths):
    """Concatenation of ``arange(s, s + l)`` for each pair, without a Python loop."""
    total = int(lengths.sum())
    out = np.ones(total, dtype=np.int64)
    if total == 0:
        return out
    nz = lengths > 0
    s, l = starts[nz], lengths[nz]
    heads = np.zeros(len(l), dtype=np.int64)
    np.cumsum(l[:-1], out=heads[1:])
    out[0] = s[0]
    out[heads[1:]] = s[1:] - (s[:-1] + l[:-1] - 1)
    return np.cumsum(out)


def _csr_of(sets: Sequence[CandidateSet]):
    offsets = np.zeros(len(sets) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(s) for s in sets])
    ids = np.concatenate([s.ids for s in sets]).astype(np.int64)
    dists = np.concatenate([s.distances for s in sets]).astype(np.float64)
    return offsets, ids, dists


def _check_set(cset: CandidateSet, params: PrivacyParams):
    if cset.gamma != params.gamma:
        raise ValueError(
            f"candidate set built for gamma={cset.gamma}, params say gamma={params.gamma}")
    if len(cset) == 0:
        raise ValueError("empty candidate set")


def tem_privatize_words(sets: Sequence[CandidateSet], params: PrivacyParams,
                        rng: np.random.Generator) -> np.ndarray:
    """One TEM draw per candidate set, sharing a single random stream."""
    for s in sets:
        _check_set(s, params)
    if not sets:
        return np.empty(0, dtype=np.int64)
    vocab_size = sets[0].vocab_size
    offsets, ids, dists = _csr_of(sets)
    return _tem_select(offsets, ids, dists, vocab_size, params, rng)


def tem_privatize_word(cset: CandidateSet, params: PrivacyParams,
                       rng: np.random.Generator) -> int:
    return int(tem_privatize_words([cset], params, rng)[0])


@dataclass(frozen=True, eq=False)
class Distribution:
    """Output law of a mechanism for one input, held as log-probabilities by id."""

    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def __getitem__(self, i):
        return float(np.exp(self.log_probs[i]))

    def __len__(self):
        return len(self.log_probs)

    def total(self) -> float:
        return float(np.exp(logsumexp(self.log_probs)))


def tem_exact_distribution(cset: CandidateSet, params: PrivacyParams,
                           two_stage: bool = True) -> Distribution:
    """Exact output probabilities of TEM for one candidate set.

    With ``two_stage`` the bottom candidate is scored as the mechanism does it
    (``-gamma + 2 ln(c) / epsilon``) and its mass is split evenly over the
    ``c`` far words. Otherwise every far word enters the softmax on its own
    with score ``-gamma``. The two agree; having both is what lets the tests
    check that folding the far words into one candidate is harmless.
    """
    _check_set(cset, params)
    half = params.epsilon / 2.0
    n = cset.vocab_size
    c = cset.complement_count
    member_logw = -half * cset.distances
    out = np.empty(n)
    outside = np.ones(n, dtype=bool)
    outside[cset.ids] = False
    if two_stage:
        terms = member_logw
        if c > 0:
            bottom = half * (-params.gamma + 2.0 * math.log(c) / params.epsilon)
            terms = np.append(member_logw, bottom)
        log_z = logsumexp(terms)
        out[cset.ids] = member_logw - log_z
        if c > 0:
            out[outside] = bottom - log_z - math.log(c)
    else:
        far_logw = np.full(c, -half * params.gamma)
        log_z = logsumexp(np.concatenate([member_logw, far_logw]))
        out[cset.ids] = member_logw - log_z
        out[outside] = far_logw - log_z
    return Distribution(out)


class TEM:
    """TEM backed by a precomputed `TruncationIndex`."""

    name = "tem"

    def __init__(self, index: TruncationIndex, params: PrivacyParams):
        if index.gamma != params.gamma:
            raise ValueError(f"index built for gamma={index.gamma}, params say {params.gamma}")
        self.index = index
        self.params = params

    @classmethod
    def build(cls, space: MetricSpace, params: PrivacyParams, **build_kw) -> TEM:
        return cls(build_index(space, params.gamma, **build_kw), params)

    @property
    def epsilon(self) -> float:
        return self.params.epsilon

    @property
    def vocab_size(self) -> int:
        return self.index.vocab_size

    def privatize_ids(self, ids, rng: np.random.Generator) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) == 0:
            return np.empty(0, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise IndexError("word id out of range")
        lo = self.index.offsets[ids]
        sizes = self.index.offsets[ids + 1] - lo
        src = _ranges(lo, sizes)
        offsets = np.zeros(len(ids) + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        return _tem_select(offsets, self.index.ids[src], self.index.distances[src],
                           self.vocab_size, self.params, rng)

    def privatize_many(self, id_lists, rngs) -> list[np.ndarray]:
        """``[privatize_ids(ids, rng) for ...]`` computed in one vectorised pass.

        Each generator is consumed exactly as `privatize_ids` would consume it,
        so the results are identical.
        """
        id_lists = [np.asarray(x, dtype=np.int64) for x in id_lists]
        counts = np.array([len(x) for x in id_lists], dtype=np.int64)
        ids = np.concatenate(id_lists) if id_lists else np.empty(0, dtype=np.int64)
        if len(ids) and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError("word id out of range")
        lo = self.index.offsets[ids]
        sizes = self.index.offsets[ids + 1] - lo
        src = _ranges(lo, sizes)
        offsets = np.zeros(len(ids) + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        layout = _TemLayout(offsets, self.index.ids[src], self.index.distances[src],
                            self.vocab_size, self.params)
        # slots per document, then one uniform block per document's own stream
        tok_bounds = np.concatenate([[0], np.cumsum(counts)])
        slot_bounds = np.concatenate([[0], np.cumsum(layout.slots)])[tok_bounds]
        u = np.empty(layout.total)
        for rng, a, b in zip(rngs, slot_bounds[:-1], slot_bounds[1:]):
            if b > a:
                u[a:b] = rng.random(b - a)
        winner, fell = layout.select(np.maximum(u, _TINY))
        if len(fell):
            doc_of = np.searchsorted(tok_bounds, fell, side="right") - 1
            picks = np.empty(len(fell), dtype=np.int64)
            cuts = np.flatnonzero(np.diff(doc_of)) + 1
            for part in np.split(np.arange(len(fell)), cuts):
                rows = fell[part]
                picks[part] = rngs[doc_of[part[0]]].integers(0, layout.complement[rows])
            winner[fell] = layout.far_words(fell, picks)
        return np.split(winner, tok_bounds[1:-1])

    def privatize_word(self, w: int, rng: np.random.Generator) -> int:
        return tem_privatize_word(self.index.candidates(w), self.params, rng)

    def exact_distribution(self, w: int) -> Distribution:
        return tem_exact_distribution(self.index.candidates(w), self.params)


# -- Madlib ---------------------------------------------------------------------


def madlib_privatize_word(space: MetricSpace, w: int, epsilon: float,
                          rng: np.random.Generator) -> int:
    return int(Madlib(space, epsilon).privatize_ids([w], rng)[0])


class Madlib:
    """Perturb the embedding, then snap to the nearest vocabulary word."""

    name = "madlib"

    def __init__(self, space: MetricSpace, epsilon: float):
        if not epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {epsilon}")
        self.space = space
        self.epsilon = float(epsilon)

    @property
    def vocab_size(self) -> int:
        return self.space.size

    def privatize_ids(self, ids, rng: np.random.Generator) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) == 0:
            return np.empty(0, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise IndexError("word id out of range")
        noise = sample_exp_ball_noise(rng, self.space.dim, self.epsilon, size=len(ids))
        return nearest_neighbors(self.space, self.space.vectors[ids] + noise)

    def privatize_many(self, id_lists, rngs) -> list[np.ndarray]:
        """``[privatize_ids(ids, rng) for ...]`` with a single nearest-neighbour pass."""
        id_lists = [np.asarray(x, dtype=np.int64) for x in id_lists]
        counts = [len(x) for x in id_lists]
        if not sum(counts):
            return [np.empty(0, dtype=np.int64) for _ in id_lists]
        ids = np.concatenate(id_lists)
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise IndexError("word id out of range")
        noise = np.concatenate([
            sample_exp_ball_noise(rng, self.space.dim, self.epsilon, size=n)
            for rng, n in zip(rngs, counts) if n])
        out = nearest_neighbors(self.space, self.space.vectors[ids] + noise)
        return np.split(out, np.cumsum(counts)[:-1])

    def privatize_word(self, w: int, rng: np.random.Generator) -> int:
        return int(self.privatize_ids([w], rng)[0])


# -- documents and configuration ----------------------------------------------

PRIVATIZED, DROPPED, PASSTHROUGH = "privatized", "dropped", "passthrough"


def _lookup(words, vocab, policy):
    flags, ids = [], []
    for tok in words:
        i = vocab.index.get(tok)
        if i is not None:
            flags.append(PRIVATIZED)
            ids.append(i)
        elif policy == "error":
            raise OOVError(tok)
        else:
            flags.append(DROPPED if policy == "drop" else PASSTHROUGH)
    return np.array(ids, dtype=np.int64), flags


def _reassemble(words, vocab, flags, replaced):
    replaced = iter(replaced)
    out = []
    for tok, flag in zip(words, flags):
        if flag == PRIVATIZED:
            out.append(vocab.words[next(replaced)])
        elif flag == PASSTHROUGH:
            out.append(tok)
    return out


def _check_policy(policy):
    if policy not in OOV_POLICIES:
        raise ValueError(f"unknown OOV policy {policy!r}")


def privatize_document(words: Sequence[str], vocab: Vocabulary, mech, policy: str = "error",
                       rng: np.random.Generator | None = None):
    """Replace every in-vocabulary token with an independent mechanism draw.

    Out-of-vocabulary tokens follow ``policy``: ``"error"`` raises `OOVError`,
    ``"drop"`` removes them, ``"passthrough"`` keeps them unchanged.

    Each token is privatised independently; repeated words in one document
    each spend their own budget and no combined guarantee is claimed.

    Returns:
      ``(output_words, flags)`` where ``flags[i]`` describes input token ``i``.
    """
    _check_policy(policy)
    if rng is None:
        raise ValueError("an explicit random generator is required")
    ids, flags = _lookup(words, vocab, policy)
    return _reassemble(words, vocab, flags, mech.privatize_ids(ids, rng)), flags


def privatize_documents(docs: Sequence[Sequence[str]], vocab: Vocabulary, mech,
                        policy: str, rngs: Sequence[np.random.Generator]):
    """`privatize_document` over many documents, one generator each, batched.

    Returns ``(outputs, flags, ids_in, ids_out)``; the id arrays are per
    document and cover the privatised tokens only.
    """
    _check_policy(policy)
    looked = [_lookup(words, vocab, policy) for words in docs]
    ids_in = [ids for ids, _ in looked]
    ids_out = mech.privatize_many(ids_in, rngs)
    outputs = [_reassemble(words, vocab, flags, rep)
               for words, (_, flags), rep in zip(docs, looked, ids_out)]
    return outputs, [f for _, f in looked], ids_in, ids_out


@dataclass
class MechanismConfig:
    """Plain mechanism settings: ``{mechanism, epsilon, gamma|beta, seed, oov_policy}``."""

    mechanism: str = "tem"
    epsilon: float | None = None
    gamma: float | None = None
    beta: float | None = None
    seed: int = 0
    oov_policy: str = "error"

    def validate(self) -> MechanismConfig:
        if self.mechanism not in ("tem", "madlib"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.epsilon is None or not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.mechanism == "tem" and (self.gamma is None) == (self.beta is None):
            raise ValueError("TEM needs exactly one of gamma or beta")
        if self.oov_policy not in OOV_POLICIES:
            raise ValueError(f"unknown OOV policy {self.oov_policy!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> MechanismConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def privacy_params(self, vocab_size: int) -> PrivacyParams:
        self.validate()
        if self.gamma is not None:
            return PrivacyParams(self.epsilon, self.gamma, self.beta)
        return PrivacyParams.calibrated(self.epsilon, self.beta, vocab_size)

    def build(self, space: MetricSpace, index: TruncationIndex | None = None):
        self.validate()
        if self.mechanism == "madlib":
            return Madlib(space, self.epsilon)
        params = self.privacy_params(space.size)
        if index is None:
            index = build_index(space, params.gamma)
        elif not index.matches(space):
            raise ValueError("index does not belong to this vocabulary")
        return TEM(index, params)
