"""Checking the privacy claims on a small vocabulary.

The exact check enumerates every (w, w', y) triple. The sampled check is all
that is available for Madlib, and it can only fail to find a violation.
"""
from temdp import Madlib, MetricSpace, PrivacyParams
from temdp.verify import (
    broken_bottom_weight_oracle,
    check_metric_dp_exact,
    check_metric_dp_monte_carlo,
    check_sensitivity_lemma,
    identity_sampler,
    tem_oracle,
)

space = MetricSpace.from_arrays([[0.0, 0.0], [0.3, 0.1], [1.0, 0.2], [4.0, 4.0]],
                                ["cat", "kitten", "dog", "car"])
eps = 1.0

for gamma in (0.0, 0.5, 3.0):
    lemma = check_sensitivity_lemma(space, gamma)
    dp = check_metric_dp_exact(tem_oracle(space, PrivacyParams(eps, gamma)), space, eps)
    print(f"gamma={gamma}: lemma {lemma.passed}, metric DP {dp.passed}, "
          f"cases {lemma.stats['case_counts']}")

# Doubling the far-word weight breaks the guarantee for the close pair.
broken = check_metric_dp_exact(broken_bottom_weight_oracle(space, PrivacyParams(eps, 0.0)),
                               space, eps)
print("broken oracle passes?", broken.passed, "worst:", broken.worst_case)

print("Madlib:", check_metric_dp_monte_carlo(Madlib(space, eps).privatize_ids, space, eps)
      .stats["verdict"])
print("identity:", check_metric_dp_monte_carlo(identity_sampler, space, eps).stats["verdict"])
