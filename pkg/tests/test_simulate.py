import dataclasses

import numpy as np
import pytest
from scipy import stats

from zimix.distributions import make_rng
from zimix.model import validate_dataset
from zimix.simulate import (
    DEFAULT_BETA,
    gaussian_outcome,
    generate_dataset,
    generate_random_effects,
    hrs_shaped_scenario,
    tobit_outcome,
    two_outcome_scenario,
    twopart_outcome,
    zip_outcome,
)

N = 100_000


class TestRandomEffects:
    def test_label_counts(self):
        _, labels = generate_random_effects(two_outcome_scenario(seed=0), make_rng(0))
        sd = np.sqrt(300 * 0.7 * 0.3)
        assert abs(np.sum(labels == 0) - 210) < 3 * sd

    def test_component_covariance(self):
        scen = two_outcome_scenario(seed=0, m=10_000)
        gamma, labels = generate_random_effects(scen, make_rng(1))
        g2 = gamma[labels == 1]
        assert np.allclose(np.cov(g2.T), 1.5 * np.eye(2), atol=0.15)
        assert np.allclose(g2.mean(axis=0), [1.0, 1.0], atol=0.05)

    def test_degenerate_weights(self):
        scen = dataclasses.replace(two_outcome_scenario(seed=0), weights=(1.0, 0.0))
        _, labels = generate_random_effects(scen, make_rng(2))
        assert np.all(labels == 0)


class TestGaussian:
    def test_pure_noise(self):
        y = gaussian_outcome(np.zeros(N), 1.0, make_rng(0))
        assert abs(y.mean()) < 0.01 and abs(y.var() - 1.0) < 0.02

    def test_least_squares_recovers_beta(self):
        sim = generate_dataset(two_outcome_scenario(seed=3))
        f = sim.dataset.feature("y1")
        m = sim.dataset.m
        # individual-specific slopes on the time covariate absorb the random effects
        slopes = np.zeros((f.y.size, m))
        slopes[np.arange(f.y.size), f.subject] = f.Z[:, 0]
        A = np.hstack([f.X, slopes])
        coef, *_ = np.linalg.lstsq(A, f.y, rcond=None)
        resid = f.y - A @ coef
        s2 = resid @ resid / (f.y.size - A.shape[1])
        se = np.sqrt(s2 * np.diag(np.linalg.inv(A.T @ A))[:4])
        assert np.all(np.abs(coef[:4] - np.array(DEFAULT_BETA)) < 2 * se)


class TestTwoPart:
    def test_zero_fraction(self):
        y = generate_dataset(two_outcome_scenario(seed=0)).dataset.feature("y2").y
        assert y.size == 3000
        assert abs(np.mean(y == 0) - 0.30) < 0.02

    def test_no_zeros(self):
        y = twopart_outcome(np.full(1000, 10.0), 0.0, 1.0, make_rng(0))
        assert np.all(y > 0)

    def test_positive_residuals_standard_normal(self):
        eta = np.full(N, 8.0)
        y = twopart_outcome(eta, 0.3, 1.0, make_rng(1))
        r = y[y > 0] - 8.0
        assert abs(r.mean()) < 0.02 and abs(r.std() - 1.0) < 0.02
        assert stats.kstest(r, "norm").pvalue > 0.001

    def test_log_scale_is_lognormal(self):
        y = twopart_outcome(np.zeros(N), 0.5, 1.0, make_rng(2), positive_scale="log")
        assert abs(np.log(y[y > 0]).std() - 1.0) < 0.02

    def test_identity_scale_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            twopart_outcome(np.zeros(100), 0.0, 1.0, make_rng(3))


class TestZip:
    def test_zero_mass(self):
        y = zip_outcome(0.3, np.full(N, 2.0), make_rng(0))
        assert abs(np.mean(y == 0) - (0.3 + 0.7 * np.exp(-2.0))) < 0.01

    def test_all_structural(self):
        assert np.all(zip_outcome(1.0, np.full(1000, 5.0), make_rng(1)) == 0)

    def test_mean(self):
        y = zip_outcome(0.3, np.full(N, 2.0), make_rng(2))
        assert abs(y.mean() / (0.7 * 2.0) - 1.0) < 0.01


class TestTobit:
    def test_half_censored(self):
        y = tobit_outcome(np.zeros(N), 1.0, make_rng(0))
        assert abs(np.mean(y == 0) - 0.5) < 0.005
        assert np.all(y >= 0)

    def test_tail_censoring(self):
        y = tobit_outcome(np.full(N, 2.0), 1.0, make_rng(1))
        assert abs(np.mean(y == 0) - 0.02275) < 0.005


class TestDatasets:
    def test_two_outcome_dimensions(self):
        sim = generate_dataset(two_outcome_scenario(seed=0))
        assert sim.dataset.m == 300
        for f in sim.dataset.features:
            assert f.y.size == 3000
            assert np.array_equal(np.unique(f.time), np.arange(1, 11))
            assert np.allclose(np.unique(f.Z[:, 0]), np.arange(1, 11) / 10)
        assert sim.dataset.covariates == ("x1", "x2", "x3", "x4")
        X = sim.dataset.features[0].X
        per_individual = X[::10]
        assert np.allclose(per_individual.mean(axis=0), [5, -5, 0, 0], atol=[0.2, 0.2, 0.02, 0.02])

    @pytest.mark.parametrize("scen", [two_outcome_scenario(seed=4), hrs_shaped_scenario(seed=4, m=200)])
    def test_deterministic_and_valid(self, scen):
        a, b = generate_dataset(scen), generate_dataset(scen)
        assert a.dataset == b.dataset
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.gamma, b.gamma)
        validate_dataset(a.dataset, a.families)
        c = generate_dataset(dataclasses.replace(scen, seed=5))
        assert not np.array_equal(a.dataset.features[0].y, c.dataset.features[0].y)

    def test_invalid_scenarios(self):
        with pytest.raises(ValueError):
            dataclasses.replace(two_outcome_scenario(), weights=(0.6, 0.6))
        with pytest.raises(ValueError):
            dataclasses.replace(two_outcome_scenario(), covs=(np.eye(2), -np.eye(2)))
