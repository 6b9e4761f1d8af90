import numpy as np
import pytest

from feduhb.datasets import Dataset, gen_quadratic, load_mnist
from feduhb.numerics import rng_stream


@pytest.fixture(scope="session")
def mnist_train():
    return load_mnist(split="train")


@pytest.fixture(scope="session")
def mnist_test():
    return load_mnist(split="test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_quadratic():
    return gen_quadratic(4, 6, 0.5, 5.0, rng_stream(7, "test-quadratic"))


def random_classification(rng, n=40, d=10, k=3):
    X = rng.standard_normal((n, d))
    y = rng.integers(0, k, n)
    return Dataset(X, y, num_classes=k)


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n[2:])):
        verdict, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {verdict}  {detail}")
