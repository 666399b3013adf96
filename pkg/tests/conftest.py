import numpy as np
import pytest

from temdp import MetricSpace

ACCEPTANCE_RESULTS = []


def toy():
    """1-D space a=0, b=1, c=5."""
    return MetricSpace.from_arrays([0.0, 1.0, 5.0], ["a", "b", "c"])


@pytest.fixture
def toy_space():
    return toy()


def random_space(rng, max_words=30, max_dim=5, min_words=3):
    n = int(rng.integers(min_words, max_words + 1))
    dim = int(rng.integers(1, max_dim + 1))
    scale = rng.choice([0.3, 1.0, 3.0])
    x = rng.standard_normal((n, dim)) * scale
    if rng.random() < 0.3:
        # a few near-duplicates make tiny distances common
        x[1] = x[0] + 1e-3 * rng.standard_normal(dim)
    return MetricSpace.from_arrays(x)


def instances(count, seed, **kw):
    rng = np.random.default_rng(seed)
    return [random_space(rng, **kw) for _ in range(count)]


@pytest.fixture
def record_criterion():
    def record(name, passed, detail=""):
        ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
