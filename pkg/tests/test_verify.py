import json
import math

import numpy as np
import pytest

from temdp import TEM, Madlib, MetricSpace, PrivacyParams, build_index
from temdp.index import CandidateSet, TruncationIndex
from temdp.verify import (
    NO_VIOLATION,
    VIOLATION,
    DomainTooLargeError,
    broken_bottom_weight_oracle,
    check_alg_equivalence,
    check_bottom_equivalence,
    check_metric_dp_exact,
    check_metric_dp_monte_carlo,
    check_sensitivity_lemma,
    check_utility_bound,
    identity_sampler,
    run_suite,
    tem_oracle,
    wilson_interval,
    worst_case_outside_mass,
)

from conftest import instances


# -- sensitivity -----------------------------------------------------------------------


def test_sensitivity_toy_case_counts(toy_space):
    r = check_sensitivity_lemma(toy_space, 2.0)
    assert r.passed
    # words within 2 of a, b, c: 2, 2, 1  ->  sum k^2, sum k(n-k) twice, sum (n-k)^2
    assert r.stats["case_counts"] == {"case_1": 9, "case_2": 6, "case_3": 6, "case_4": 6}
    assert r.stats["triples_checked"] == 27
    assert r.stats["max_excess"] <= 0


def test_sensitivity_infinite_gamma_is_triangle_inequality():
    space = instances(1, seed=21)[0]
    r = check_sensitivity_lemma(space, math.inf)
    assert r.passed
    assert r.stats["case_counts"]["case_4"] == 0


def test_sensitivity_lemma_random():
    for space in instances(10, seed=22):
        for gamma in (0.0, float(np.median(space.pairwise()))):
            assert check_sensitivity_lemma(space, gamma).passed


def test_sensitivity_too_large():
    space = MetricSpace.from_arrays(np.arange(201.0))
    with pytest.raises(DomainTooLargeError):
        check_sensitivity_lemma(space, 1.0)


# -- exact metric DP ------------------------------------------------------------------


def test_exact_dp_toy_passes(toy_space):
    for gamma in (0.0, 0.5, 2.0, 10.0):
        params = PrivacyParams(1.0, gamma)
        r = check_metric_dp_exact(tem_oracle(toy_space, params), toy_space, 1.0)
        assert r.passed
        assert r.pairs_checked == 9


def test_exact_dp_index_oracle(toy_space):
    params = PrivacyParams(1.0, 2.0)
    r = check_metric_dp_exact(tem_oracle(build_index(toy_space, 2.0), params), toy_space, 1.0)
    assert r.passed


def test_broken_oracle_fails_on_close_pair():
    space = MetricSpace.from_arrays([0.0, 0.1])
    params = PrivacyParams(1.0, 0.05)
    r = check_metric_dp_exact(broken_bottom_weight_oracle(space, params), space, 1.0)
    assert not r.passed
    # ln P_0(1) - ln P_1(1) = ln 2 - eps * gamma / 2, bound eps * 0.1
    expected = math.log(2) - 0.025 - 0.1
    assert r.max_log_ratio_violation == pytest.approx(expected, abs=1e-12)
    assert r.worst_pair == (0, 1, 1)


def test_tem_satisfies_looser_epsilon_check():
    for space in instances(5, seed=23):
        params = PrivacyParams(1.0, float(np.median(space.pairwise())))
        assert check_metric_dp_exact(tem_oracle(space, params), space, 2.0).passed


def test_tem_fails_tighter_epsilon_check():
    space = MetricSpace.from_arrays([0.0, 1.0])
    # both words are members, so the log ratio is 4 * 1 / 2 = 2 > 1
    params = PrivacyParams(4.0, 5.0)
    assert not check_metric_dp_exact(tem_oracle(space, params), space, 1.0).passed


def test_exact_dp_rejects_unnormalised(toy_space):
    from temdp import Distribution

    with pytest.raises(ValueError, match="sums"):
        check_metric_dp_exact(lambda w: Distribution(np.zeros(3)), toy_space, 1.0)


# -- utility ----------------------------------------------------------------------------


@pytest.mark.parametrize("n", [2, 5, 500])
@pytest.mark.parametrize("beta", [0.5, 0.01, 0.001])
def test_worst_case_mass_equals_beta(n, beta):
    from temdp import calibrate_gamma

    gamma = calibrate_gamma(1.3, beta, n)
    if gamma > 0:
        assert worst_case_outside_mass(1.3, gamma, n) == pytest.approx(beta, abs=1e-12)


def test_utility_toy():
    space = MetricSpace.from_arrays(np.arange(5.0))
    r = check_utility_bound(space, 1.0, 0.001)
    assert r.passed
    assert r.min_mass >= 0.999
    assert r.params["gamma"] == pytest.approx(16.586098279537, abs=1e-9)


def test_utility_half_beta(toy_space):
    r = check_utility_bound(toy_space, 1.0, 0.5)
    assert r.passed and r.min_mass >= 0.5 - 1e-12


# -- Monte Carlo ------------------------------------------------------------------------


def test_wilson_interval_contains_estimate():
    lo, hi = wilson_interval(np.array([0, 50, 100]), 100, 0.01)
    assert lo[0] == 0 and hi[2] == 1
    assert lo[1] < 0.5 < hi[1]
    # z = 2.5758, n = 100, p = 0.5: 2 z sqrt(0.0025 + z^2 / 4e4) / (1 + z^2 / 100)
    assert hi[1] - lo[1] == pytest.approx(0.24944, abs=1e-4)


def test_monte_carlo_identity_is_certified(toy_space):
    r = check_metric_dp_monte_carlo(identity_sampler, toy_space, 1.0)
    assert not r.passed
    assert r.stats["verdict"] == VIOLATION


def test_monte_carlo_madlib_and_tem_not_certified(toy_space):
    for mech in (Madlib(toy_space, 1.0), TEM(build_index(toy_space, 2.0), PrivacyParams(1.0, 2.0))):
        r = check_metric_dp_monte_carlo(mech.privatize_ids, toy_space, 1.0, seed=3)
        assert r.passed
        assert r.stats["verdict"] == NO_VIOLATION


def test_monte_carlo_trials_floor(toy_space):
    with pytest.raises(ValueError):
        check_metric_dp_monte_carlo(identity_sampler, toy_space, 1.0, trials=100)


# -- equivalences ------------------------------------------------------------------------


def test_alg_equivalence_random():
    for space in instances(10, seed=24):
        params = PrivacyParams(1.0, float(np.median(space.pairwise())))
        assert check_alg_equivalence(space, params).passed


def test_alg_equivalence_detects_mutated_index():
    space = MetricSpace.from_arrays(np.arange(6.0))
    params = PrivacyParams(1.0, 2.0)
    idx = build_index(space, 2.0)
    sets = list(idx)
    victim = sets[2]
    # drop word 1 from word 2's list and count it as far instead
    keep = victim.ids != 1
    sets[2] = CandidateSet(2, victim.gamma, victim.ids[keep], victim.distances[keep],
                           victim.complement_count + 1)
    bad = TruncationIndex.from_candidate_sets(sets, idx.fingerprint)
    r = check_alg_equivalence(space, params, index=bad)
    assert not r.passed
    assert r.worst_case["w"] == 2


def test_bottom_equivalence():
    for space in instances(10, seed=25):
        for gamma in (0.0, float(np.median(space.pairwise()))):
            r = check_bottom_equivalence(space, PrivacyParams(0.7, gamma))
            assert r.passed and r.worst_case["max_abs_prob_gap"] <= 1e-12


# -- suite and serialisation -------------------------------------------------------------


def test_suite_passes_and_serialises(toy_space):
    out = run_suite(toy_space, 1.0, beta=0.001, seed=1)
    assert out["passed"]
    assert out["params"]["gamma_battery"] == [0.0, 2.5, pytest.approx(2 * math.log(1998), abs=1e-12)]
    text = json.dumps(out)
    for c in json.loads(text)["checks"]:
        assert set(c) == {"check", "params", "passed", "worst_case", "stats"}


def test_suite_is_deterministic(toy_space):
    assert json.dumps(run_suite(toy_space, 1.0, seed=4)) == json.dumps(run_suite(toy_space, 1.0, seed=4))


def test_suite_break_detected():
    space = MetricSpace.from_arrays([0.0, 0.1, 3.0])
    out = run_suite(space, 1.0, break_="tem-bot-weight")
    assert not out["passed"]
    failed = [c["check"] for c in out["checks"] if not c["passed"]]
    assert failed == ["metric_dp_exact"] * len(failed) and failed


def test_suite_unknown_break(toy_space):
    with pytest.raises(ValueError):
        run_suite(toy_space, 1.0, break_="nope")
