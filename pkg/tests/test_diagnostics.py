import dataclasses
import warnings

import numpy as np
import pytest
from scipy import integrate
from sklearn.metrics import adjusted_rand_score

from conftest import make_dataset
from zimix.diagnostics import (
    DiagnosticsError,
    DiagnosticsReport,
    PedReport,
    adjusted_rand_index,
    cell_kl,
    compute_deviance,
    compute_ped,
    diagnose,
    effective_sample_size,
    gelman_rubin,
    posterior_membership,
    relabel,
    relabel_permutation,
)
from zimix.distributions import make_rng
from zimix.engine import ChainOutput, McmcConfig, initialize, run_chains
from zimix.kernels import Model, SweepState, log_joint
from zimix.model import FamilySpec, MixtureState, ShrinkageState
from zimix.simulate import FeatureScenario, SimScenario, generate_dataset

LOG_2PI = 1.8378770664093453
ZIP_CELL_DEVIANCE = -2.0 * np.log(0.3 + 0.7 * np.exp(-2.0))  # 1.85908...


def one_cell_state(kind, y, betas, sigma2=None):
    ds = make_dataset([np.atleast_1d(y)], X=np.ones((np.size(y), 1)), m=1)
    model = Model.build(ds, [FamilySpec(kind)], 1)
    state = initialize(model, McmcConfig(K=1, init="random"), make_rng(0))
    state.gamma = np.zeros_like(state.gamma)
    state.shrinkage = {k: ShrinkageState(np.array([b]), np.ones(1), np.ones(1)) for k, b in betas.items()}
    if sigma2 is not None:
        state.sigma2 = {"y1": sigma2}
    return model, state


class TestDeviance:
    def test_gaussian_at_mode(self):
        model, state = one_cell_state("gaussian", 0.7, {"y1.mean": 0.7}, 1.0)
        assert compute_deviance(state, model) == pytest.approx(LOG_2PI, abs=1e-12)
        assert compute_deviance(state, model) == pytest.approx(1.83788, abs=1e-5)

    def test_additive_over_cells(self):
        m1, s1 = one_cell_state("gaussian", [0.3], {"y1.mean": 0.1}, 2.0)
        m2, s2 = one_cell_state("gaussian", [1.4], {"y1.mean": 0.1}, 2.0)
        m12, s12 = one_cell_state("gaussian", [0.3, 1.4], {"y1.mean": 0.1}, 2.0)
        total = compute_deviance(s1, m1) + compute_deviance(s2, m2)
        assert compute_deviance(s12, m12) == pytest.approx(total, abs=1e-12)

    def test_zip_zero_cell(self):
        model, state = one_cell_state("zip", 0.0, {"y1.zero": np.log(0.3 / 0.7), "y1.count": np.log(2.0)})
        assert compute_deviance(state, model) == pytest.approx(ZIP_CELL_DEVIANCE, abs=1e-12)
        # the rounded reference 1.85926 is 2e-4 above the exact -2 log(0.394734) = 1.85908
        assert compute_deviance(state, model) == pytest.approx(1.85926, abs=5e-4)

    def test_better_fit_lowers_deviance(self):
        m, far = one_cell_state("gaussian", 0.0, {"y1.mean": 2.0}, 1.0)
        _, near = one_cell_state("gaussian", 0.0, {"y1.mean": 0.5}, 1.0)
        assert compute_deviance(near, m) < compute_deviance(far, m)


class TestCellKl:
    """Closed forms against numeric integration or summation."""

    def _numeric(self, kind, ea, eb, s2a=None, s2b=None):
        if kind == "zip":
            y = np.arange(200.0)
            la = cell_loglik_vec(kind, y, ea, s2a)
            lb = cell_loglik_vec(kind, y, eb, s2b)
            return float(np.sum(np.exp(la) * (la - lb)))
        f = lambda v: (lambda a, b: np.exp(a) * (a - b))(
            cell_loglik_vec(kind, np.array([v]), ea, s2a)[0], cell_loglik_vec(kind, np.array([v]), eb, s2b)[0]
        )
        if kind == "gaussian":
            return integrate.quad(f, -np.inf, np.inf)[0]
        la0 = cell_loglik_vec(kind, np.array([0.0]), ea, s2a)[0]
        lb0 = cell_loglik_vec(kind, np.array([0.0]), eb, s2b)[0]
        point = np.exp(la0) * (la0 - lb0)
        cont = sum(integrate.quad(f, a, b, limit=200)[0] for a, b in [(1e-12, 1), (1, 20), (20, np.inf)])
        return point + cont

    @pytest.mark.parametrize(
        "kind,ea,eb,s2a,s2b",
        [
            ("gaussian", {"mean": 0.3}, {"mean": -0.4}, 1.2, 0.7),
            ("tobit", {"mean": 0.3}, {"mean": -0.4}, 1.2, 0.7),
            ("tobit", {"mean": -1.5}, {"mean": 0.8}, 0.5, 2.0),
            ("twopart", {"zero": 0.2, "pos": 0.5}, {"zero": -0.6, "pos": 0.1}, 0.8, 1.1),
            ("zip", {"zero": -0.3, "count": 0.9}, {"zero": 0.5, "count": 0.2}, None, None),
        ],
    )
    def test_matches_numeric(self, kind, ea, eb, s2a, s2b):
        ea = {k: np.array([v]) for k, v in ea.items()}
        eb = {k: np.array([v]) for k, v in eb.items()}
        closed = float(cell_kl(kind, ea, eb, s2a, s2b)[0])
        assert closed == pytest.approx(self._numeric(kind, ea, eb, s2a, s2b), abs=1e-6)
        assert float(cell_kl(kind, ea, ea, s2a, s2a)[0]) == pytest.approx(0.0, abs=1e-12)


def cell_loglik_vec(kind, y, etas, s2):
    from zimix.model import cell_loglik

    return cell_loglik(kind, y, {k: np.broadcast_to(v, y.shape) for k, v in etas.items()}, s2)


# ------------------------------------------------------------------ #
# PED
# ------------------------------------------------------------------ #


@pytest.fixture(scope="module")
def small_fit():
    rng = np.random.default_rng(0)
    m, T = 30, 4
    g = np.where(rng.random(m) < 0.5, -1.5, 1.5)
    y = np.repeat(g, T) + rng.normal(size=m * T)
    ds = make_dataset([y], m=m)
    model = Model.build(ds, [FamilySpec("gaussian")], 2)
    chains = run_chains(model, McmcConfig(chains=3, iterations=400, burn_in=100, thin=2, K=2, seed=5), parallel=False)
    return model, chains


def frozen_chains(model, state, n=20, count=2):
    """Chains whose every draw equals ``state``."""
    out = []
    for c in range(count):
        out.append(
            ChainOutput(
                chain_id=c, K=model.K,
                beta={k: np.repeat(sh.beta[None], n, 0) for k, sh in state.shrinkage.items()},
                tau2={k: np.repeat(sh.tau2[None], n, 0) for k, sh in state.shrinkage.items()},
                lam2={k: np.repeat(sh.lam2[None], n, 0) for k, sh in state.shrinkage.items()},
                sigma2={k: np.full(n, v) for k, v in state.sigma2.items()},
                pi=np.repeat(state.mixture.pi[None], n, 0),
                mu=np.repeat(state.mixture.mu[None], n, 0),
                Psi=np.repeat(state.mixture.Psi[None], n, 0),
                gamma=np.repeat(state.gamma[None], n, 0),
                alloc=np.repeat(state.mixture.alloc[None], n, 0),
                membership=np.full((n, model.m, model.K), 1.0 / model.K),
                deviance=np.full(n, compute_deviance(state, model)),
                acceptance={}, mh_scale={},
                covariates=model.ds.covariates, re_names=("y1.mean.t",),
            )
        )
    return out


class TestPed:
    def test_constant_draws_have_no_optimism(self, small_fit):
        model, chains = small_fit
        state = initialize(model, McmcConfig(K=2), make_rng(1))
        frozen = frozen_chains(model, state)
        d = compute_deviance(state, model)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            paired = compute_ped(frozen, model, "paired-chain")
        two = compute_ped(frozen, model, "two-pD")
        assert paired.popt == pytest.approx(0.0, abs=1e-9) and paired.ped == pytest.approx(d, rel=1e-12)
        assert two.popt == pytest.approx(0.0, abs=1e-6) and two.ped == pytest.approx(d, rel=1e-10)

    def test_report_fields(self, small_fit):
        model, chains = small_fit
        rep = compute_ped(chains, model, "two-pD")
        assert rep.k == 2 and rep.popt >= 0
        assert rep.dbar == pytest.approx(np.concatenate([c.deviance for c in chains]).mean())
        assert PedReport.from_dict(rep.to_dict()) == rep
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            paired = compute_ped(chains, model)
        assert paired.estimator == "paired-chain" and paired.popt > 0

    def test_single_chain_rejected(self, small_fit):
        model, chains = small_fit
        with pytest.raises(DiagnosticsError):
            compute_ped(chains[:1], model, "paired-chain")
        compute_ped(chains[:1], model, "two-pD")

    def test_unknown_estimator(self, small_fit):
        model, chains = small_fit
        with pytest.raises(ValueError):
            compute_ped(chains, model, "waic")

    def test_degenerate_weights_flagged(self, small_fit):
        model, chains = small_fit
        short = [dataclasses.replace(c, beta={k: v[:4] for k, v in c.beta.items()}, gamma=c.gamma[:4],
                                     sigma2={k: v[:4] for k, v in c.sigma2.items()}, deviance=c.deviance[:4])
                 for c in chains[:2]]
        with pytest.warns(RuntimeWarning):
            rep = compute_ped(short, model)
        assert "weight-degenerate" in rep.flags and rep.min_weight_ess < 10

    def test_invariant_to_relabeling(self, small_fit):
        model, chains = small_fit
        swapped = []
        for c in chains:
            p = np.array([1, 0])
            swapped.append(dataclasses.replace(c, pi=c.pi[:, p], mu=c.mu[:, p], Psi=c.Psi[:, p], alloc=1 - c.alloc))
        for est in ("paired-chain", "two-pD"):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                a = compute_ped(chains, model, est)
                b = compute_ped(swapped, model, est)
                c = compute_ped(relabel(chains), model, est)
            assert abs(a.ped - b.ped) < 1e-10 and abs(a.ped - c.ped) < 1e-10


# ------------------------------------------------------------------ #
# Convergence
# ------------------------------------------------------------------ #


class TestGelmanRubin:
    def test_stationary(self):
        rng = np.random.default_rng(0)
        r, flag = gelman_rubin(rng.normal(size=(2, 10_000)))
        assert 0.99 <= r <= 1.02 and not flag

    def test_separated_chains(self):
        rng = np.random.default_rng(1)
        x = np.vstack([rng.normal(size=1000), rng.normal(10.0, 1.0, size=1000)])
        assert gelman_rubin(x)[0] > 3

    def test_constant(self):
        r, flag = gelman_rubin(np.full((3, 50), 2.5))
        assert np.isnan(r) and flag

    def test_affine_invariance(self):
        x = np.random.default_rng(2).normal(size=(3, 200)) + np.array([[0.0], [0.2], [0.1]])
        assert abs(gelman_rubin(x)[0] - gelman_rubin(3.0 * x - 7.0)[0]) < 1e-10

    def test_split_detects_trend(self):
        t = np.linspace(0, 5, 500)
        x = np.vstack([t, t]) + np.random.default_rng(3).normal(scale=0.1, size=(2, 500))
        assert gelman_rubin(x)[0] > 1.5

    def test_preconditions(self):
        with pytest.raises(DiagnosticsError):
            gelman_rubin(np.zeros((1, 100)))
        with pytest.raises(DiagnosticsError):
            gelman_rubin(np.zeros((2, 5)))


class TestEss:
    def test_iid(self):
        x = np.random.default_rng(0).normal(size=(2, 5000))
        assert 0.85 * 10_000 < effective_sample_size(x) < 1.15 * 10_000

    def test_ar1(self):
        rng = np.random.default_rng(1)
        rho, n = 0.9, 50_000
        x = np.empty(n)
        x[0] = rng.normal()
        e = rng.normal(size=n) * np.sqrt(1 - rho**2)
        for t in range(1, n):
            x[t] = rho * x[t - 1] + e[t]
        expected = n * (1 - rho) / (1 + rho)
        assert abs(effective_sample_size(x) / expected - 1.0) < 0.15


class TestDiagnose:
    def test_report(self, small_fit):
        _, chains = small_fit
        rep = diagnose(chains)
        assert "y1.precision" in rep.rhat and "pi.1" in rep.rhat
        finite = [v for v in rep.rhat.values() if np.isfinite(v)]
        assert min(finite) >= 0.99
        assert set(rep.ess) == set(rep.rhat)
        back = DiagnosticsReport.from_dict(rep.to_dict())
        assert back.rhat.keys() == rep.rhat.keys()
        assert all(np.isclose(back.rhat[k], v, equal_nan=True) for k, v in rep.rhat.items())

    def test_flags_constant_trace(self, small_fit):
        _, chains = small_fit
        frozen = [dataclasses.replace(c, sigma2={"y1": np.ones(c.n_draws)}) for c in chains]
        rep = diagnose(frozen)
        assert np.isnan(rep.rhat["y1.sigma2"]) and "y1.sigma2" in rep.flags
        assert "y1.sigma2" not in rep.exceeds(1.1)


# ------------------------------------------------------------------ #
# Relabeling and membership
# ------------------------------------------------------------------ #


def toy_chain(mu, alloc, n_m=None):
    n, K, q = mu.shape
    m = alloc.shape[1]
    return ChainOutput(
        chain_id=0, K=K, beta={}, tau2={}, lam2={}, sigma2={},
        pi=np.tile(np.arange(1, K + 1) / (K * (K + 1) / 2), (n, 1)),
        mu=mu, Psi=np.tile(np.arange(1, K + 1)[:, None, None] * np.eye(q), (n, 1, 1, 1)),
        gamma=np.zeros((n, m, q)), alloc=alloc,
        membership=np.tile(np.linspace(0.1, 0.9, K) / np.linspace(0.1, 0.9, K).sum(), (n, m, 1)),
        deviance=np.zeros(n), acceptance={}, mh_scale={}, covariates=(), re_names=tuple("ab"[:q]),
    )


class TestRelabel:
    def test_ordered_unchanged(self):
        c = toy_chain(np.array([[[-1.0, 0.0], [3.0, 0.0]]]), np.array([[0, 1, 1]]))
        r = relabel([c])[0]
        assert r == c

    def test_swap(self):
        c = toy_chain(np.array([[[3.0, 0.0], [-1.0, 0.0]]]), np.array([[0, 1, 1]]))
        r = relabel([c])[0]
        assert np.array_equal(r.mu[0, :, 0], [-1.0, 3.0])
        assert np.array_equal(r.pi[0], c.pi[0, ::-1])
        assert np.array_equal(r.Psi[0], c.Psi[0, ::-1])
        assert np.array_equal(r.membership[0], c.membership[0, :, ::-1])
        assert np.array_equal(r.alloc[0], [1, 0, 0])

    def test_ties(self):
        mu = np.array([[[1.0, 2.0], [1.0, -2.0], [1.0, -2.0]]])
        assert np.array_equal(relabel_permutation(mu)[0], [1, 2, 0])

    def test_log_posterior_unchanged(self, small_fit):
        model, chains = small_fit
        c = chains[0]
        r = relabel([c])[0]
        for d in range(0, c.n_draws, 15):
            def state(ch):
                return SweepState(
                    mixture=MixtureState(ch.pi[d], ch.alloc[d], ch.mu[d], ch.Psi[d]),
                    gamma=ch.gamma[d],
                    shrinkage={k: ShrinkageState(ch.beta[k][d], ch.tau2[k][d], ch.lam2[k][d]) for k in ch.beta},
                    sigma2={k: float(v[d]) for k, v in ch.sigma2.items()},
                )
            assert abs(log_joint(state(c), model) - log_joint(state(r), model)) < 1e-10


class TestMembership:
    def test_unanimous(self):
        c = toy_chain(np.zeros((5, 2, 1)) + np.array([[0.0], [1.0]]), np.zeros((5, 3), dtype=int))
        probs, hard = posterior_membership([c])
        assert np.array_equal(probs, np.tile([1.0, 0.0], (3, 1)))
        assert np.all(hard == 0)

    def test_sixty_forty(self):
        alloc = np.array([[0], [0], [0], [1], [1]] * 2)
        c = toy_chain(np.zeros((10, 2, 1)) + np.array([[0.0], [1.0]]), alloc)
        probs, hard = posterior_membership([c])
        assert np.allclose(probs, [[0.6, 0.4]], atol=1e-15) and hard[0] == 0

    def test_tie_goes_to_lower_index(self):
        c = toy_chain(np.zeros((2, 2, 1)) + np.array([[0.0], [1.0]]), np.array([[0], [1]]))
        assert posterior_membership([c])[1][0] == 0

    def test_rows_exact_frequencies(self, small_fit):
        _, chains = small_fit
        probs, _ = posterior_membership(chains)
        total = sum(c.n_draws for c in chains)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(probs * total, np.round(probs * total), atol=1e-9)


class TestAri:
    def test_identical(self):
        assert adjusted_rand_index([0, 0, 1, 1, 2], [0, 0, 1, 1, 2]) == 1.0

    def test_singletons_vs_together(self):
        assert adjusted_rand_index(np.arange(10), np.zeros(10)) == 0.0

    def test_permuted_labels(self):
        assert adjusted_rand_index([0, 0, 1, 1, 2], [2, 2, 0, 0, 1]) == pytest.approx(1.0)

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = rng.integers(0, 3, 50), rng.integers(0, 4, 50)
            assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(b, a), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            adjusted_rand_index([0, 1], [0, 1, 1])


# ------------------------------------------------------------------ #
# Single-component data
# ------------------------------------------------------------------ #


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_ped_prefers_one_component_on_single_component_data(seed):
    scen = SimScenario(
        m=100, timepoints=5, weights=(1.0,), means=((0.0,),), covs=(((1.0,),),),
        features=(FeatureScenario("y1", "gaussian", beta=(1.0, -1.0), re_index=0),),
        covariate_means=(0.0, 0.0), covariate_sds=(1.0, 1.0), covariate_names=("x1", "x2"), seed=seed,
    )
    sim = generate_dataset(scen)
    peds = {}
    for K in (1, 4):
        model = Model.build(sim.dataset, sim.families, K)
        chains = run_chains(model, McmcConfig(chains=3, iterations=1500, burn_in=500, thin=2, K=K, seed=seed), parallel=False)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            peds[K] = compute_ped(chains, model).ped
    assert peds[1] <= peds[4]
