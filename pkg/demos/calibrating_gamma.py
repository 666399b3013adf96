"""Choosing the truncation threshold from a utility target.

gamma(eps, beta, n) is the smallest threshold for which even an isolated word
lands within gamma of itself with probability at least 1 - beta.
"""
import numpy as np

from temdp import MetricSpace, calibrate_gamma
from temdp.verify import check_utility_bound, worst_case_outside_mass

for n in (5, 1_000, 400_000):
    row = [f"{calibrate_gamma(eps, 0.001, n):7.3f}" for eps in (0.5, 1, 2, 4)]
    print(f"|W|={n:<7} gamma at eps 0.5/1/2/4:", " ".join(row))

# The worst case is a word with no neighbours inside gamma; at the calibrated
# value its far-word mass is exactly beta.
g = calibrate_gamma(1.0, 0.01, 50)
print("worst-case outside mass:", worst_case_outside_mass(1.0, g, 50))

# On a real point cloud, most words do better than the worst case.
rng = np.random.default_rng(1)
space = MetricSpace.from_arrays(rng.standard_normal((50, 5)) * 6)
report = check_utility_bound(space, epsilon=1.0, beta=0.01)
print(f"gamma {report.params['gamma']:.2f}; within-gamma mass: min {report.min_mass:.6f}, "
      f"median {np.median(report.mass_within_gamma):.6f}")

# beta >= (n - 1) / n needs no truncation at all
print("gamma for beta=0.9, n=5:", calibrate_gamma(1.0, 0.9, 5))
