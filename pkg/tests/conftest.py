from pathlib import Path

import numpy as np
import pytest

from ndk_dynamics import DynamicsParams, LearningProblem

DATA_DIR = Path(__file__).parent / "data"
MNIST_IMAGES = DATA_DIR / "mnist" / "train-images-idx3-ubyte.gz"


def synthetic_p2(act="relu", L=1, **params):
    """The two-point orthogonal task with a test point overlapping point 1 by 3/4."""
    p = DynamicsParams(**{"T": 1e-3, "dt": 0.01, "t_max": 5.0, **params})
    return LearningProblem(np.eye(2), [1.0, -1.0], act, L, p,
                           test_gram=[[0.75, 0.0]], test_self=[1.0], test_targets=[1.0])


def random_gram(rng, n, n0=12, scale_spread=0.0):
    """Gram matrix of n random inputs with self-Grams exp(U(-spread, spread))."""
    x = rng.standard_normal((n, n0))
    x /= np.sqrt(np.sum(x * x, axis=1) / n0)[:, None]
    x *= np.exp(rng.uniform(-scale_spread, scale_spread, n))[:, None]
    return x @ x.T / n0


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
