import numpy as np
import pytest

from zimix.model import FamilySpec, FeatureData, LongitudinalDataset


def make_dataset(ys, X=None, Z=None, m=None, T=None, names=None, covariates=None, re_covariates=("t",)):
    """Balanced toy dataset; every feature shares the design."""
    ys = [np.asarray(y, dtype=float) for y in ys]
    n = ys[0].size
    if m is None:
        m = n // T
    T = n // m
    subject = np.repeat(np.arange(m), T)
    time = np.tile(np.arange(1, T + 1), m)
    if X is None:
        X = np.column_stack([np.ones(n), np.linspace(-1, 1, n)])
    if Z is None:
        Z = (time / T)[:, None]
    names = names or tuple(f"y{r + 1}" for r in range(len(ys)))
    covariates = covariates or tuple(f"x{j + 1}" for j in range(X.shape[1]))
    feats = tuple(FeatureData(nm, y, X, Z, subject, time) for nm, y in zip(names, ys))
    return LongitudinalDataset(tuple(range(1, m + 1)), tuple(covariates), tuple(re_covariates), feats)


@pytest.fixture
def small_gaussian():
    rng = np.random.default_rng(0)
    y = rng.normal(size=40)
    return make_dataset([y], m=10), (FamilySpec("gaussian"),)


@pytest.fixture
def four_family():
    rng = np.random.default_rng(1)
    n = 60
    ys = [
        np.maximum(rng.normal(0.5, 1.0, n), 0.0),
        rng.normal(size=n),
        np.where(rng.random(n) < 0.4, 0.0, np.exp(rng.normal(size=n))),
        np.where(rng.random(n) < 0.6, 0.0, rng.poisson(1.5, n)).astype(float),
    ]
    fams = (FamilySpec("tobit"), FamilySpec("gaussian"), FamilySpec("twopart"), FamilySpec("zip"))
    return make_dataset(ys, m=15), fams
