"""Executable privacy and utility checks on small vocabularies.

Exact checks enumerate every ``(w, w', y)`` triple in log space. The sampled
check for Madlib can only ever report "no violation certified": sampling is
evidence, not proof.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .embeddings import MetricSpace
from .index import TruncationIndex, build_index, range_query
from .mechanisms import (
    TEM,
    Distribution,
    Madlib,
    PrivacyParams,
    calibrate_gamma,
    random_source,
    tem_exact_distribution,
    tem_privatize_words,
)

TOLERANCE = 1e-9
MAX_SENSITIVITY_WORDS = 200
MAX_EXACT_WORDS = 1000
MIN_TRIALS = 10_000

NO_VIOLATION = "no violation certified"
VIOLATION = "violation certified"


class DomainTooLargeError(ValueError):
    pass


@dataclass
class Report:
    """Outcome of one check; serialises to ``{check, params, passed, worst_case, stats}``."""

    check: str
    params: dict
    passed: bool
    worst_case: dict | None = None
    stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


@dataclass
class DpCheckReport(Report):
    pairs_checked: int = 0
    max_log_ratio_violation: float = -math.inf
    worst_pair: tuple | None = None

    def to_dict(self):
        d = Report(self.check, self.params, self.passed, self.worst_case, dict(self.stats))
        d.stats.update(pairs_checked=self.pairs_checked,
                       max_log_ratio_violation=self.max_log_ratio_violation)
        return d.to_dict()


@dataclass
class UtilityReport(Report):
    mass_within_gamma: np.ndarray | None = None
    min_mass: float = math.nan
    beta_target: float = math.nan

    def to_dict(self):
        d = Report(self.check, self.params, self.passed, self.worst_case, dict(self.stats))
        d.stats.update(min_mass_within_gamma=self.min_mass, beta_target=self.beta_target)
        return d.to_dict()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# -- oracles --------------------------------------------------------------------


def tem_oracle(source: MetricSpace | TruncationIndex, params: PrivacyParams
               ) -> Callable[[int], Distribution]:
    """Map ``w -> exact TEM output distribution``.

    A `MetricSpace` source runs a fresh range query per call; an index source
    reads the stored candidate set.
    """
    if isinstance(source, TruncationIndex):
        return lambda w: tem_exact_distribution(source.candidates(w), params)
    return lambda w: tem_exact_distribution(range_query(source, w, params.gamma), params)


def broken_bottom_weight_oracle(space: MetricSpace, params: PrivacyParams,
                                factor: float = 2.0) -> Callable[[int], Distribution]:
    """TEM with every far word's weight multiplied by ``factor``. Not private."""
    half = params.epsilon / 2.0

    def oracle(w):
        cset = range_query(space, w, params.gamma)
        logw = np.full(space.size, -half * params.gamma + math.log(factor))
        logw[cset.ids] = -half * cset.distances
        return Distribution(logw - np.logaddexp.reduce(logw))

    return oracle


def identity_sampler(ids, rng):
    """Returns its input. The obvious non-private mechanism."""
    return np.asarray(ids, dtype=np.int64).copy()


# -- Lemma: truncated scores keep sensitivity d(w, w') --------------------------


def check_sensitivity_lemma(space: MetricSpace, gamma: float, tol: float = TOLERANCE) -> Report:
    """Exhaustively check ``|f(i, w) - f(i, w')| <= d(w, w')`` with ``f = -min(d, gamma)``.

    Every triple is classified by whether ``i`` is within ``gamma`` of ``w``
    and of ``w'`` (cases 1-4); ``stats["case_counts"]`` tallies them.
    """
    n = space.size
    if n > MAX_SENSITIVITY_WORDS:
        raise DomainTooLargeError(
            f"{n} words; the exhaustive triple scan allows at most {MAX_SENSITIVITY_WORDS}")
    if not gamma >= 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    d = space.pairwise()
    f = -np.minimum(d, gamma)  # f[i, w]
    inside = d <= gamma
    cases = np.zeros(4, dtype=np.int64)
    worst = -math.inf
    worst_triple = None
    for i in range(n):
        # rows w, columns w'
        excess = np.abs(f[i][:, None] - f[i][None, :]) - d
        ins = inside[i]
        a, b = ins[:, None], ins[None, :]
        cases += [np.sum(a & b), np.sum(a & ~b), np.sum(~a & b), np.sum(~a & ~b)]
        k = int(np.argmax(excess))
        if excess.flat[k] > worst:
            worst = float(excess.flat[k])
            w, w2 = divmod(k, n)
            case = 1 + 2 * (not ins[w]) + (not ins[w2])
            worst_triple = {"i": i, "w": w, "w_prime": w2, "case": int(case),
                            "score_gap": float(abs(f[i, w] - f[i, w2])),
                            "distance": float(d[w, w2])}
    passed = worst <= tol
    return Report("sensitivity_lemma", {"gamma": gamma, "tolerance": tol}, bool(passed),
                  worst_triple,
                  {"triples_checked": n ** 3, "max_excess": worst,
                   "case_counts": {f"case_{j + 1}": int(c) for j, c in enumerate(cases)}})


# -- metric DP, exact --------------------------------------------------------------


def _log_prob_matrix(oracle, n):
    logp = np.empty((n, n))
    for w in range(n):
        dist = oracle(w)
        lp = np.asarray(dist.log_probs, dtype=np.float64)
        if lp.shape != (n,):
            raise ValueError(f"oracle returned {lp.shape} probabilities for {n} words")
        total = np.logaddexp.reduce(lp)
        if not abs(total) <= 1e-9:
            raise ValueError(f"oracle distribution for word {w} sums to {math.exp(total)}")
        logp[w] = lp
    return logp


def check_metric_dp_exact(oracle: Callable[[int], Distribution], space: MetricSpace,
                          epsilon: float, tol: float = TOLERANCE) -> DpCheckReport:
    """Verify ``ln P_w(y) - ln P_w'(y) <= epsilon * d(w, w')`` for every triple.

    Runs entirely on log-probabilities. A zero ``P_w'(y)`` against a non-zero
    ``P_w(y)`` is an infinite violation.
    """
    n = space.size
    if n > MAX_EXACT_WORDS:
        raise DomainTooLargeError(
            f"{n} words; the exact check allows at most {MAX_EXACT_WORDS}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    logp = _log_prob_matrix(oracle, n)
    d = space.pairwise()
    worst, worst_pair = -math.inf, None
    for w in range(n):
        with np.errstate(invalid="ignore"):
            diff = logp[w][None, :] - logp  # rows w', columns y
        diff[:, np.isneginf(logp[w])] = -math.inf
        viol = diff - epsilon * d[w][:, None]
        k = int(np.argmax(viol))
        if viol.flat[k] > worst:
            worst = float(viol.flat[k])
            w2, y = divmod(k, n)
            worst_pair = (w, w2, y)
    passed = worst <= tol
    worst_case = None
    if worst_pair is not None:
        w, w2, y = worst_pair
        worst_case = {"w": w, "w_prime": w2, "y": y, "log_ratio": float(logp[w, y] - logp[w2, y]),
                      "bound": float(epsilon * d[w, w2]), "violation": worst}
    return DpCheckReport("metric_dp_exact", {"epsilon": epsilon, "tolerance": tol},
                         bool(passed), worst_case, {"words": n},
                         pairs_checked=n * n, max_log_ratio_violation=worst,
                         worst_pair=worst_pair)


# -- utility --------------------------------------------------------------------------


def worst_case_outside_mass(epsilon: float, gamma: float, vocab_size: int) -> float:
    """Far-word mass when only the input lies within ``gamma``."""
    far = (vocab_size - 1) * math.exp(-epsilon * gamma / 2.0)
    return far / (1.0 + far)


def check_utility_bound(space: MetricSpace, epsilon: float, beta: float,
                        tol: float = TOLERANCE) -> UtilityReport:
    """At the calibrated ``gamma``, every input keeps at least ``1 - beta`` mass within ``gamma``."""
    gamma = calibrate_gamma(epsilon, beta, space.size)
    params = PrivacyParams(epsilon, gamma, beta)
    mass = np.empty(space.size)
    for w in range(space.size):
        cset = range_query(space, w, gamma)
        mass[w] = tem_exact_distribution(cset, params).probs[cset.ids].sum()
    analytic = worst_case_outside_mass(epsilon, gamma, space.size)
    w = int(np.argmin(mass))
    passed = mass[w] >= 1 - beta - tol and analytic <= beta + tol
    return UtilityReport("utility_bound", {"epsilon": epsilon, "beta": beta, "gamma": gamma},
                         bool(passed), {"w": w, "mass_within_gamma": float(mass[w])},
                         {"analytic_worst_case_outside_mass": analytic},
                         mass_within_gamma=mass, min_mass=float(mass[w]), beta_target=beta)


# -- metric DP, sampled -------------------------------------------------------------


def wilson_interval(successes, trials, alpha):
    """Two-sided Wilson score interval at confidence ``1 - alpha``."""
    z = stats.norm.ppf(1 - alpha / 2)
    p = np.asarray(successes, dtype=np.float64) / trials
    denom = 1 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * np.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return np.clip(centre - half, 0, 1), np.clip(centre + half, 0, 1)


def check_metric_dp_monte_carlo(sampler, space: MetricSpace, epsilon: float,
                                trials: int = MIN_TRIALS, alpha: float = 0.01,
                                seed: int = 0) -> Report:
    """Sample each input ``trials`` times and look for a certified ratio violation.

    ``sampler(ids, rng)`` must return one output id per input id (e.g.
    ``TEM.privatize_ids``). A triple is flagged when the Wilson lower bound of
    ``P_w(y)`` exceeds ``exp(epsilon * d(w, w'))`` times the upper bound of
    ``P_w'(y)``. Passing means only that nothing was certified.
    """
    if trials < MIN_TRIALS:
        raise ValueError(f"trials must be >= {MIN_TRIALS}, got {trials}")
    n = space.size
    if n > MAX_EXACT_WORDS:
        raise DomainTooLargeError(f"{n} words; at most {MAX_EXACT_WORDS} allowed")
    counts = np.zeros((n, n), dtype=np.int64)
    for w in range(n):
        out = sampler(np.full(trials, w, dtype=np.int64), random_source(seed, w))
        counts[w] = np.bincount(out, minlength=n)
    lo, hi = wilson_interval(counts, trials, alpha)
    d = space.pairwise()
    with np.errstate(divide="ignore"):
        log_lo, log_hi = np.log(lo), np.log(hi)
    worst, worst_case = -math.inf, None
    for w in range(n):
        gap = log_lo[w][None, :] - log_hi - epsilon * d[w][:, None]  # rows w', cols y
        k = int(np.argmax(gap))
        if gap.flat[k] > worst:
            worst = float(gap.flat[k])
            w2, y = divmod(k, n)
            worst_case = {"w": w, "w_prime": w2, "y": y,
                          "p_w_lower": float(lo[w, y]), "p_w_prime_upper": float(hi[w2, y]),
                          "bound": float(epsilon * d[w, w2]), "certified_gap": worst}
    certified = worst > 0
    return Report("metric_dp_monte_carlo",
                  {"epsilon": epsilon, "trials": trials, "alpha": alpha, "seed": seed},
                  not certified, worst_case,
                  {"verdict": VIOLATION if certified else NO_VIOLATION,
                   "samples": trials * n})


# -- equivalences -------------------------------------------------------------------


def check_alg_equivalence(space: MetricSpace, params: PrivacyParams,
                          index: TruncationIndex | None = None, seed: int = 0,
                          draws: int = 200, tol: float = 1e-12) -> Report:
    """On-the-fly range queries and a prebuilt index give the same mechanism.

    Compares exact distributions word by word, then the sampled outputs of
    both paths under identical seeds.
    """
    if index is None:
        index = build_index(space, params.gamma)
    if index.vocab_size != space.size:
        raise ValueError("index and space disagree on vocabulary size")
    worst, worst_w, sample_mismatch = 0.0, None, None
    for w in range(space.size):
        fresh = range_query(space, w, params.gamma)
        stored = index.candidates(w)
        p = tem_exact_distribution(fresh, params).probs
        q = tem_exact_distribution(stored, params).probs
        gap = float(np.abs(p - q).max())
        if gap > worst or worst_w is None:
            worst, worst_w = gap, w
        a = tem_privatize_words([fresh] * draws, params, random_source(seed, w))
        b = TEM(index, params).privatize_ids(np.full(draws, w), random_source(seed, w))
        if sample_mismatch is None and not np.array_equal(a, b):
            sample_mismatch = w
    passed = worst <= tol and sample_mismatch is None
    return Report("alg_equivalence", {"epsilon": params.epsilon, "gamma": params.gamma,
                                      "tolerance": tol, "seed": seed},
                  bool(passed), {"w": worst_w, "max_abs_prob_gap": worst,
                                 "first_sample_mismatch": sample_mismatch},
                  {"words": space.size, "draws_per_word": draws})


def check_bottom_equivalence(space: MetricSpace, params: PrivacyParams,
                             tol: float = 1e-12) -> Report:
    """Bottom-then-uniform and the flat softmax over far words agree exactly."""
    worst, worst_w = 0.0, 0
    for w in range(space.size):
        cset = range_query(space, w, params.gamma)
        p = tem_exact_distribution(cset, params, two_stage=True).probs
        q = tem_exact_distribution(cset, params, two_stage=False).probs
        gap = float(np.abs(p - q).max())
        if gap > worst:
            worst, worst_w = gap, w
    return Report("bottom_equivalence", {"epsilon": params.epsilon, "gamma": params.gamma,
                                         "tolerance": tol},
                  bool(worst <= tol), {"w": worst_w, "max_abs_prob_gap": worst},
                  {"words": space.size})


# -- suite ----------------------------------------------------------------------------

BREAKS = ("tem-bot-weight",)


def run_suite(space: MetricSpace, epsilon: float, beta: float = 0.001,
              gamma: float | None = None, seed: int = 0, trials: int = MIN_TRIALS,
              alpha: float = 0.01, break_: str | None = None) -> dict:
    """Run every check at a battery of thresholds and aggregate the reports.

    The battery is ``{0, gamma, diameter / 2}`` where ``gamma`` is given or
    calibrated from ``(epsilon, beta)``; small thresholds are what make the
    far-word path matter on a small vocabulary.
    """
    if space.size > MAX_SENSITIVITY_WORDS:
        raise DomainTooLargeError(
            f"{space.size} words is too many for exhaustive checks; "
            f"subsample to at most {MAX_SENSITIVITY_WORDS} words")
    if break_ is not None and break_ not in BREAKS:
        raise ValueError(f"unknown break {break_!r}; choose from {BREAKS}")
    main_gamma = calibrate_gamma(epsilon, beta, space.size) if gamma is None else gamma
    battery = sorted({0.0, float(main_gamma), space.diameter() / 2})
    reports = []
    for g in battery:
        params = PrivacyParams(epsilon, g)
        reports.append(check_sensitivity_lemma(space, g))
        oracle = (broken_bottom_weight_oracle(space, params) if break_ == "tem-bot-weight"
                  else tem_oracle(space, params))
        r = check_metric_dp_exact(oracle, space, epsilon)
        r.params["gamma"] = g
        reports.append(r)
    reports.append(check_utility_bound(space, epsilon, beta))
    main = PrivacyParams(epsilon, main_gamma)
    index = build_index(space, main_gamma)
    reports.append(check_alg_equivalence(space, main, index=index, seed=seed))
    reports.append(check_bottom_equivalence(space, main))
    for mech in (TEM(index, main), Madlib(space, epsilon)):
        r = check_metric_dp_monte_carlo(mech.privatize_ids, space, epsilon, trials, alpha, seed)
        r.params["mechanism"] = mech.name
        reports.append(r)
    checks = [r.to_dict() for r in reports]
    return {"passed": all(c["passed"] for c in checks),
            "params": {"epsilon": epsilon, "beta": beta, "gamma": main_gamma,
                       "gamma_battery": battery, "seed": seed, "break": break_},
            "checks": checks}
