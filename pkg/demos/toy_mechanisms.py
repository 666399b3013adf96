"""TEM and Madlib side by side on three words on a line.

a=0, b=1, c=5. With gamma=2 the word a keeps a and b as real candidates and
folds c into the bottom element.
"""
import numpy as np

from temdp import TEM, Madlib, MetricSpace, PrivacyParams, build_index, random_source

space = MetricSpace.from_arrays([0.0, 1.0, 5.0], ["a", "b", "c"])
params = PrivacyParams(epsilon=2.0, gamma=2.0)
tem = TEM(build_index(space, params.gamma), params)


def show(p):
    return "  ".join(f"{w}:{x:.4f}" for w, x in zip(space.vocab.words, p))


print("candidate set of 'a':", tem.index.candidates(0))

# Exact output law for input a. Each far word gets weight exp(-eps * gamma / 2),
# so c is as likely as any word at distance exactly gamma.
exact = tem.exact_distribution(0).probs
print("exact     ", show(exact))

draws = tem.privatize_ids(np.zeros(100_000, dtype=int), random_source(0))
freq = np.bincount(draws, minlength=3) / len(draws)
print("sampled   ", show(freq))

# Madlib perturbs the embedding with exp(-eps |z|) noise and snaps back.
madlib = Madlib(space, epsilon=2.0)
draws = madlib.privatize_ids(np.zeros(100_000, dtype=int), random_source(0))
freq = np.bincount(draws, minlength=3) / len(draws)
print("Madlib    ", show(freq))

# Larger epsilon, more copies of the input come back.
for eps in (0.5, 2.0, 8.0):
    p = TEM(tem.index, PrivacyParams(eps, 2.0)).exact_distribution(0).probs
    print(f"eps={eps:<4} P(a -> a) = {p[0]:.3f}")
