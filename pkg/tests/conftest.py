import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mismatchglm.families import Family


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(20260809)


def fit_families() -> dict[str, Family]:
    """The families exercised by the fitting paths."""
    return {
        "gaussian": Family.gaussian(1.0),
        "poisson": Family.poisson(),
        "binomial": Family.binomial(25),
        "bernoulli": Family.bernoulli(),
        "gamma_log": Family.gamma(shape=50.0, link="log"),
    }


def draw_admissible_eta(family: Family, rng: np.random.Generator, size: int) -> np.ndarray:
    from mismatchglm.families import Kind, Link

    if family.kind == Kind.GAMMA and family.link == Link.CANONICAL:
        return -np.exp(rng.uniform(-2.0, 2.0, size))
    if family.kind == Kind.POISSON:
        return rng.uniform(-4.0, 5.0, size)
    if family.kind == Kind.GAMMA:
        return rng.uniform(-3.0, 3.0, size)
    return rng.uniform(-8.0, 8.0, size)


def sample_dataset(family: Family, rng: np.random.Generator, n: int, d: int, beta_scale: float = 0.4):
    """A well-conditioned random GLM instance with intercept."""
    from mismatchglm.families import Kind

    X = np.hstack([np.ones((n, 1)), rng.uniform(-1.0, 1.0, (n, d - 1))])
    beta = rng.normal(0.0, beta_scale, d)
    if family.kind == Kind.POISSON:
        beta[0] = abs(beta[0]) + 1.0
    elif family.kind == Kind.GAMMA:
        beta[0] = abs(beta[0]) + 0.5
    eta = X @ beta
    y = family.sample(eta, rng)
    return X, y, beta
