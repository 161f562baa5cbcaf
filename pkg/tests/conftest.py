import numpy as np
import pytest
from hypothesis import settings

from cfunlearn.datagen import ScmSpec, generate_scm_dataset, split_train_test
from cfunlearn.model import TrainConfig, init_model, train_baseline

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def scm_split():
    ds = generate_scm_dataset(ScmSpec(samples=900), seed=11)
    return split_train_test(ds, 0.2, seed=11)


@pytest.fixture(scope="session")
def scm_train(scm_split):
    return scm_split[0]


@pytest.fixture(scope="session")
def teacher(scm_train):
    model = init_model(scm_train.num_features, [32, 32], scm_train.num_classes, seed=5)
    return train_baseline(model, scm_train, TrainConfig(learning_rate=3e-3, epochs=40, seed=5))


def fd_grad(f, x, eps=1e-5):
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def pytest_terminal_summary(terminalreporter):
    # the acceptance suite records one verdict line per criterion it ran
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
