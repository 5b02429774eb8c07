import numpy as np
import pytest

from dyndml.data import split
from dyndml.residualize import ResidualSet, residualize_markov
from dyndml.regression import LearnerSpec
from dyndml.simulate import DGPConfig, generate


def small_config(n=400, m=3, seed=0, **kw):
    base = dict(n=n, m=m, d=1, p=2, A=0.5, B=0.5 * np.eye(2), C=0.0, D=[[0.4, 0.4]], mu=[0.8, 0.8],
                theta0=[1.0], sigma_eps=0.5, sigma_zeta=0.5, sigma_eta=0.5, seed=seed)
    base.update(kw)
    return DGPConfig(**base)


def random_residuals(n=300, m=3, r=2, seed=0):
    rng = np.random.default_rng(seed)
    y = {t: rng.standard_normal(n) for t in range(1, m + 1)}
    tr = {(t, j): rng.standard_normal((n, r)) for t in range(1, m + 1) for j in range(t, m + 1)}
    return ResidualSet(m, r, n, y, tr, np.zeros(n, dtype=int))


@pytest.fixture
def config():
    return small_config()


@pytest.fixture
def panel(config):
    return generate(config, seed=1)


@pytest.fixture
def residuals(panel):
    return residualize_markov(panel, LearnerSpec(kind="ols"), split(panel, 3))
