"""Full-conditional update kernels and the deterministic-scan sweep.

Gaussian-scale parts (Gaussian, Tobit latent, two-part log-normal) are
conjugate directly. Logistic parts (two-part zero probability, ZIP
structural-zero probability) become conditionally Gaussian through
Polya-Gamma augmentation: with ``kappa = s - 1/2`` and ``omega ~ PG(1, psi)``
each cell contributes a Gaussian term with working response ``kappa/omega``
and weight ``omega``. Poisson count parts have no conjugate form and use
random-walk Metropolis for both their coefficients and their random-effect
slices.

All kernels take a :class:`Model` (dataset plus structure) and a
:class:`SweepState`; none mutates its inputs.
"""

from __future__ import annotations

import dataclasses
import time
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, multigammaln

from .distributions import (
    sample_dirichlet,
    sample_inverse_gaussian,
    sample_inverse_wishart,
    sample_polya_gamma,
    sample_truncated_normal,
)
from .model import (
    FamilySpec,
    LongitudinalDataset,
    MixtureState,
    Part,
    Priors,
    RandomEffectsLayout,
    ShrinkageState,
    cell_loglik,
    validate_dataset,
)

__all__ = [
    "KernelError",
    "PartData",
    "Model",
    "SweepState",
    "part_eta",
    "update_allocations",
    "update_mixing_proportions",
    "update_cluster_params",
    "update_random_effects",
    "update_fixed_effects_balasso",
    "update_balasso_scales",
    "update_lasso_rates",
    "update_poisson_coefficients",
    "update_sigma2",
    "augment_tobit",
    "augment_logistic_pg",
    "augment_zip_indicators",
    "sweep",
    "log_joint",
    "loglik_cells",
]

BETA_FLOOR = 1e-8
SWEEP_BLOCKS = (
    "augment",
    "random_effects",
    "fixed_effects",
    "sigma2",
    "allocations",
    "mixing",
    "cluster_params",
)


class KernelError(RuntimeError):
    """A Gibbs block failed; ``block`` names it."""

    def __init__(self, block: str, message: str, dump: dict | None = None):
        super().__init__(f"[{block}] {message}")
        self.block = block
        self.dump = dump or {}


# ------------------------------------------------------------------ #
# Compiled model
# ------------------------------------------------------------------ #


@dataclass(frozen=True, eq=False)
class PartData:
    part: Part
    family: str
    X: np.ndarray
    Z: np.ndarray
    subject: np.ndarray
    y: np.ndarray
    re: slice | None
    # rows of the feature this part sees (two-part positive part: y > 0)
    rows: np.ndarray
    XtX: np.ndarray | None = None

    @property
    def key(self) -> str:
        return self.part.key

    @property
    def role(self) -> str:
        return self.part.role


@dataclass(frozen=True, eq=False)
class Model:
    """Dataset plus model structure, with per-part design arrays cached."""

    ds: LongitudinalDataset
    families: tuple[FamilySpec, ...]
    K: int
    priors: Priors
    layout: RandomEffectsLayout
    parts: tuple[PartData, ...]

    @classmethod
    def build(
        cls,
        ds: LongitudinalDataset,
        families: Sequence[FamilySpec | str],
        K: int,
        priors: Priors | None = None,
    ) -> "Model":
        families = tuple(f if isinstance(f, FamilySpec) else FamilySpec(f) for f in families)
        validate_dataset(ds, families)
        if K < 1:
            raise ValueError("K must be at least 1")
        s = len(ds.re_covariates)
        all_parts = [p for f, fam in zip(ds.features, families) for p in fam.parts(f.name)]
        layout = RandomEffectsLayout.build(all_parts, s)
        parts = []
        for f, fam in zip(ds.features, families):
            for p in fam.parts(f.name):
                if p.role == "pos":
                    rows = np.flatnonzero(f.y > 0)
                    y = np.log(f.y[rows])
                else:
                    rows = np.arange(f.y.size)
                    y = f.y
                X = np.ascontiguousarray(f.X[rows])
                fixed_cells = p.link == "identity"
                parts.append(
                    PartData(
                        part=p,
                        family=fam.kind,
                        X=X,
                        Z=np.ascontiguousarray(f.Z[rows]),
                        subject=f.subject[rows],
                        y=np.asarray(y, dtype=float),
                        re=layout.slices.get(p.key),
                        rows=rows,
                        XtX=X.T @ X if fixed_cells else None,
                    )
                )
        return cls(ds, families, int(K), priors or Priors(), layout, tuple(parts))

    @property
    def m(self) -> int:
        return self.ds.m

    @property
    def q(self) -> int:
        return self.layout.q

    @property
    def P(self) -> int:
        return self.ds.P

    def part(self, key: str) -> PartData:
        for pd in self.parts:
            if pd.key == key:
                return pd
        raise KeyError(key)

    def feature_parts(self, name: str) -> dict[str, PartData]:
        return {pd.role: pd for pd in self.parts if pd.part.feature == name}

    def family_of(self, name: str) -> FamilySpec:
        return self.families[self.ds.feature_names.index(name)]

    @property
    def sigma_features(self) -> tuple[str, ...]:
        return tuple(f.name for f, fam in zip(self.ds.features, self.families) if fam.has_sigma)

    def with_K(self, K: int) -> "Model":
        return dataclasses.replace(self, K=int(K))

    def with_dataset(self, ds: LongitudinalDataset) -> "Model":
        """Same structure on new responses (designs must be unchanged)."""
        return Model.build(ds, self.families, self.K, self.priors)


@dataclass
class SweepState:
    mixture: MixtureState
    gamma: np.ndarray
    shrinkage: dict[str, ShrinkageState]
    sigma2: dict[str, float]
    ystar: dict[str, np.ndarray] = field(default_factory=dict)
    omega: dict[str, np.ndarray] = field(default_factory=dict)
    zip_w: dict[str, np.ndarray] = field(default_factory=dict)
    membership: np.ndarray | None = None
    mh_scale: dict[str, float] = field(default_factory=dict)
    mh_accept: dict[str, float] = field(default_factory=dict)

    def beta(self, key: str) -> np.ndarray:
        return self.shrinkage[key].beta

    def copy(self) -> "SweepState":
        return dataclasses.replace(
            self,
            shrinkage=dict(self.shrinkage),
            sigma2=dict(self.sigma2),
            ystar=dict(self.ystar),
            omega=dict(self.omega),
            zip_w=dict(self.zip_w),
            mh_scale=dict(self.mh_scale),
            mh_accept=dict(self.mh_accept),
        )

    def check(self, model: Model) -> None:
        """Raise ``ValueError`` if a structural invariant is violated."""
        self.mixture.check()
        for sh in self.shrinkage.values():
            sh.check()
        for name, s2 in self.sigma2.items():
            if not s2 > 0:
                raise ValueError(f"sigma2[{name}] must be positive")
        for f, fam in zip(model.ds.features, model.families):
            if fam.kind == "tobit":
                ys = self.ystar[f.name]
                cens = f.y <= 0
                if np.any(ys[cens] > 0) or not np.array_equal(ys[~cens], f.y[~cens]):
                    raise ValueError(f"latent y* for {f.name!r} inconsistent with data")
            if fam.kind == "zip":
                w = self.zip_w[f.name]
                if np.any(w[f.y > 0] != 0):
                    raise ValueError(f"structural-zero indicator set on a positive count in {f.name!r}")


# ------------------------------------------------------------------ #
# Linear predictors and working responses
# ------------------------------------------------------------------ #


def _re_term(pd: PartData, gamma: np.ndarray) -> np.ndarray:
    if pd.re is None:
        return np.zeros(pd.y.size)
    g = gamma[pd.subject, pd.re]
    return np.einsum("ij,ij->i", pd.Z, g)


def part_eta(pd: PartData, beta: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    return pd.X @ beta + _re_term(pd, gamma)


def _logistic_response(pd: PartData, state: SweepState) -> np.ndarray:
    if pd.family == "twopart":
        return (pd.y == 0).astype(float)
    return state.zip_w[pd.part.feature].astype(float)


def _working(pd: PartData, state: SweepState):
    """Working response and per-cell weight of a Gaussian-form part.

    Returns ``(u, w, mask)``; ``mask`` is ``None`` when all cells count.
    """
    if pd.part.link == "identity":
        u = state.ystar[pd.part.feature] if pd.family == "tobit" else pd.y
        w = np.full(u.size, 1.0 / state.sigma2[pd.part.feature])
        return u, w, None
    if pd.part.link == "logit":
        omega = state.omega[pd.key]
        kappa = _logistic_response(pd, state) - 0.5
        return kappa / omega, omega, None
    raise ValueError(f"part {pd.key} has no Gaussian working form")


def _poisson_rows(pd: PartData, state: SweepState) -> np.ndarray:
    return state.zip_w[pd.part.feature] == 0


# ------------------------------------------------------------------ #
# Augmentation kernels
# ------------------------------------------------------------------ #


def augment_tobit(state: SweepState, model: Model, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Latent ``y*`` on censored cells from ``N(eta, sigma2)`` truncated to ``(-inf, 0]``."""
    out = dict(state.ystar)
    for pd in model.parts:
        if pd.family != "tobit":
            continue
        name = pd.part.feature
        cens = pd.y <= 0
        ys = pd.y.astype(float).copy()
        if cens.any():
            eta = part_eta(pd, state.beta(pd.key), state.gamma)[cens]
            ys[cens] = sample_truncated_normal(eta, np.sqrt(state.sigma2[name]), -np.inf, 0.0, rng)
        out[name] = ys
    return out


def augment_logistic_pg(pd: PartData, state: SweepState, model: Model, rng: np.random.Generator) -> np.ndarray:
    """``omega ~ PG(1, psi)`` at the current logistic linear predictor."""
    psi = part_eta(pd, state.beta(pd.key), state.gamma)
    return sample_polya_gamma(np.ones(psi.size), psi, rng)


def zip_zero_posterior(p, lam) -> np.ndarray:
    """``P(structural zero | y = 0) = p / (p + (1 - p) exp(-lam))``."""
    p = np.asarray(p, dtype=float)
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore"):
        num = np.log(p)
        den = np.logaddexp(num, np.log1p(-p) - lam)
        return np.where(p > 0, np.exp(num - den), 0.0)


def augment_zip_indicators(state: SweepState, model: Model, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = dict(state.zip_w)
    for f, fam in zip(model.ds.features, model.families):
        if fam.kind != "zip":
            continue
        parts = model.feature_parts(f.name)
        zero = f.y == 0
        p = expit(part_eta(parts["zero"], state.beta(parts["zero"].key), state.gamma)[zero])
        lam = np.exp(part_eta(parts["count"], state.beta(parts["count"].key), state.gamma)[zero])
        w = np.zeros(f.y.size, dtype=np.int8)
        w[zero] = rng.random(int(zero.sum())) < zip_zero_posterior(p, lam)
        out[f.name] = w
    return out


# ------------------------------------------------------------------ #
# Random effects
# ------------------------------------------------------------------ #


def _data_precision(model: Model, state: SweepState):
    """Per-individual data precision and linear term from Gaussian-form parts."""
    m, q = model.m, model.q
    D = np.zeros((m, q, q))
    d = np.zeros((m, q))
    for pd in model.parts:
        if pd.re is None or pd.part.link == "log":
            continue
        u, w, _ = _working(pd, state)
        r = w * (u - pd.X @ state.beta(pd.key))
        idx = np.arange(pd.re.start, pd.re.stop)
        for a_i, a in enumerate(idx):
            za = pd.Z[:, a_i]
            d[:, a] += np.bincount(pd.subject, weights=za * r, minlength=m)
            for b_i in range(a_i, len(idx)):
                b = idx[b_i]
                v = np.bincount(pd.subject, weights=w * za * pd.Z[:, b_i], minlength=m)
                D[:, a, b] += v
                if b != a:
                    D[:, b, a] += v
    return D, d


def _batched_mvn_from_precision(Q, lin, rng, block):
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        eig = np.linalg.eigvalsh(0.5 * (Q + np.swapaxes(Q, -1, -2)))
        bad = np.flatnonzero(eig.min(axis=-1) <= 0)
        raise KernelError(
            block,
            f"conditional precision not positive definite for {bad.size} individuals",
            {"individuals": bad[:10].tolist(), "min_eig": eig.min(axis=-1)[bad[:10]].tolist()},
        ) from exc
    mean = np.linalg.solve(Q, lin[..., None])[..., 0]
    eps = rng.standard_normal(lin.shape)
    noise = np.linalg.solve(np.swapaxes(L, -1, -2), eps[..., None])[..., 0]
    return mean + noise


def _poisson_re_step(pd, state, model, gamma, lam, mu, scale, rng):
    """Vectorized random-walk Metropolis on one Poisson random-effect slice."""
    m = model.m
    rows = _poisson_rows(pd, state)
    sub = pd.subject[rows]
    Z = pd.Z[rows]
    y = pd.y[rows]
    xb = pd.X[rows] @ state.beta(pd.key)
    sl = pd.re

    def loglik(g):
        eta = xb + np.einsum("ij,ij->i", Z, g[sub, sl])
        return np.bincount(sub, weights=y * eta - np.exp(eta), minlength=m)

    def logprior(g):
        dev = g - mu
        return -0.5 * np.einsum("ij,ijk,ik->i", dev, lam, dev)

    prop = gamma.copy()
    prop[:, sl] += scale * rng.standard_normal((m, sl.stop - sl.start))
    log_ratio = loglik(prop) + logprior(prop) - loglik(gamma) - logprior(gamma)
    accept = np.log(rng.random(m)) < log_ratio
    out = np.where(accept[:, None], prop, gamma)
    return out, float(accept.mean())


def update_random_effects(state: SweepState, model: Model, rng: np.random.Generator):
    """Draw every ``gamma_i`` from its full conditional.

    Gaussian-form slices are drawn jointly and exactly, conditional on the
    Poisson slices; each Poisson slice then takes one Metropolis step.
    Returns ``(gamma, acceptance)`` with acceptance keyed by part.
    """
    mix = state.mixture
    q = model.q
    lam_k = np.linalg.inv(mix.Psi)
    lam = lam_k[mix.alloc]
    mu = mix.mu[mix.alloc]
    D, d = _data_precision(model, state)

    pois = [pd for pd in model.parts if pd.re is not None and pd.part.link == "log"]
    B = np.zeros(q, dtype=bool)
    for pd in pois:
        B[pd.re] = True
    A = ~B
    gamma = state.gamma.copy()
    if A.any():
        ia = np.flatnonzero(A)
        ib = np.flatnonzero(B)
        Q = lam[:, ia][:, :, ia] + D[:, ia][:, :, ia]
        lin = np.einsum("ijk,ik->ij", lam[:, ia][:, :, ia], mu[:, ia]) + d[:, ia]
        if ib.size:
            lin -= np.einsum("ijk,ik->ij", lam[:, ia][:, :, ib], gamma[:, ib] - mu[:, ib])
        gamma[:, ia] = _batched_mvn_from_precision(Q, lin, rng, "random_effects")
    accept = {}
    for pd in pois:
        key = f"{pd.key}.re"
        gamma, accept[key] = _poisson_re_step(
            pd, state, model, gamma, lam, mu, state.mh_scale.get(key, 0.5), rng
        )
    return gamma, accept


def re_posterior_precision(state: SweepState, model: Model) -> np.ndarray:
    """Full-conditional precision of each ``gamma_i`` (Gaussian-form parts only)."""
    lam = np.linalg.inv(state.mixture.Psi)[state.mixture.alloc]
    D, _ = _data_precision(model, state)
    return lam + D


# ------------------------------------------------------------------ #
# Fixed effects and shrinkage
# ------------------------------------------------------------------ #


def update_balasso_scales(
    beta: np.ndarray, lam2: np.ndarray, priors: Priors, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Refresh ``(tau2, lam2)`` given ``beta``.

    ``1/tau2`` is inverse-Gaussian with mean ``sqrt(lam2 / beta^2)`` and shape
    ``lam2``; ``lam2`` is then ``Gamma(a + 1, rate = b + tau2 / 2)``. A
    coefficient at exactly zero is floored at ``|beta| = 1e-8``.
    """
    b2 = np.maximum(beta * beta, BETA_FLOOR**2)
    inv_tau2 = sample_inverse_gaussian(np.sqrt(lam2 / b2), lam2, rng)
    tau2 = 1.0 / inv_tau2
    return tau2, update_lasso_rates(tau2, priors, rng)


def update_lasso_rates(tau2: np.ndarray, priors: Priors, rng: np.random.Generator) -> np.ndarray:
    """``lam2 ~ Gamma(a + 1, rate = b + tau2 / 2)`` per coefficient."""
    tau2 = np.asarray(tau2, dtype=float)
    lam2 = rng.gamma(priors.lasso_a + 1.0, 1.0 / (priors.lasso_b + 0.5 * tau2))
    return np.maximum(lam2, np.finfo(float).tiny)


def update_fixed_effects_balasso(
    pd: PartData, state: SweepState, model: Model, rng: np.random.Generator, *, update_scales: bool = True
) -> ShrinkageState:
    """Gaussian-form coefficient block followed by its adaptive-Lasso scales."""
    sh = state.shrinkage[pd.key]
    u, w, _ = _working(pd, state)
    target = u - _re_term(pd, state.gamma)
    if pd.XtX is not None:
        # identity-link parts share one weight across cells
        XtWX = pd.XtX / state.sigma2[pd.part.feature]
    else:
        XtWX = (pd.X * w[:, None]).T @ pd.X
    Q = XtWX + np.diag(1.0 / sh.tau2)
    lin = pd.X.T @ (w * target)
    L = np.linalg.cholesky(Q)
    mean = np.linalg.solve(Q, lin)
    beta = mean + np.linalg.solve(L.T, rng.standard_normal(mean.size))
    if not update_scales:
        return ShrinkageState(beta, sh.tau2, sh.lam2)
    tau2, lam2 = update_balasso_scales(beta, sh.lam2, model.priors, rng)
    return ShrinkageState(beta, tau2, lam2)


def _poisson_beta_logpost(pd, beta, tau2, rows, offset):
    eta = pd.X[rows] @ beta + offset
    return float(np.sum(pd.y[rows] * eta - np.exp(eta)) - 0.5 * np.sum(beta * beta / tau2))


def update_poisson_coefficients(
    pd: PartData,
    state: SweepState,
    model: Model,
    rng: np.random.Generator,
    scale: float,
    *,
    update_scales: bool = True,
) -> tuple[ShrinkageState, float]:
    """Random-walk Metropolis block update of a Poisson coefficient vector.

    Only cells that are not structural zeros contribute. The proposal
    covariance is ``scale^2`` times the inverse of an approximate Poisson
    information built from the data and the current shrinkage scales, so it
    does not depend on the coefficients being updated. Returns the new
    shrinkage block and the acceptance indicator (as a float).
    """
    sh = state.shrinkage[pd.key]
    rows = _poisson_rows(pd, state)
    offset = _re_term(pd, state.gamma)[rows]
    cur = _poisson_beta_logpost(pd, sh.beta, sh.tau2, rows, offset)
    if not np.isfinite(cur):
        raise KernelError("fixed_effects", f"non-finite Poisson log-posterior for {pd.key}")
    Xr = pd.X[rows]
    info = (Xr * (pd.y[rows] + 0.5)[:, None]).T @ Xr + np.diag(1.0 / sh.tau2)
    chol = np.linalg.cholesky(np.linalg.inv(info))
    prop = sh.beta + scale * (chol @ rng.standard_normal(sh.beta.size))
    new = _poisson_beta_logpost(pd, prop, sh.tau2, rows, offset)
    accepted = np.log(rng.random()) < new - cur
    beta = prop if accepted else sh.beta
    if not update_scales:
        return ShrinkageState(beta, sh.tau2, sh.lam2), float(accepted)
    tau2, lam2 = update_balasso_scales(beta, sh.lam2, model.priors, rng)
    return ShrinkageState(beta, tau2, lam2), float(accepted)


def update_sigma2(residuals: np.ndarray, shape0: float, rate0: float, rng: np.random.Generator) -> float:
    """Inverse-gamma draw with shape ``shape0 + n/2`` and rate ``rate0 + SSR/2``."""
    residuals = np.asarray(residuals, dtype=float)
    shape = shape0 + 0.5 * residuals.size
    rate = rate0 + 0.5 * float(residuals @ residuals)
    return float(rate / rng.standard_gamma(shape))


def sigma_residuals(name: str, state: SweepState, model: Model) -> np.ndarray:
    parts = model.feature_parts(name)
    pd = parts["pos"] if "pos" in parts else parts["mean"]
    u, _, _ = _working(pd, state)
    return u - part_eta(pd, state.beta(pd.key), state.gamma)


# ------------------------------------------------------------------ #
# Mixture kernels
# ------------------------------------------------------------------ #


def component_logdens(gamma: np.ndarray, mu: np.ndarray, Psi: np.ndarray) -> np.ndarray:
    """``log N(gamma_i; mu_k, Psi_k)`` as an ``(m, K)`` array."""
    m, q = gamma.shape
    L = np.linalg.cholesky(Psi)
    dev = gamma[:, None, :] - mu[None, :, :]
    sol = np.linalg.solve(L[None, :, :, :], dev[..., None])[..., 0]
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
    return -0.5 * (q * np.log(2 * np.pi) + logdet[None, :] + (sol**2).sum(-1))


def allocation_probabilities(gamma, pi, mu, Psi) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logp = np.log(pi)[None, :] + component_logdens(gamma, mu, Psi)
    w = np.exp(logp - logp.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def update_allocations(state: SweepState, model: Model, rng: np.random.Generator):
    """Draw ``C_i`` with probability proportional to ``pi_k N(gamma_i; mu_k, Psi_k)``.

    Computed in log space. Returns ``(alloc, probabilities)``.
    """
    mix = state.mixture
    probs = allocation_probabilities(state.gamma, mix.pi, mix.mu, mix.Psi)
    u = rng.random(model.m)
    cum = np.cumsum(probs, axis=1)
    alloc = np.minimum((cum < u[:, None] * cum[:, -1:]).sum(axis=1), model.K - 1)
    return alloc.astype(np.int64), probs


def update_mixing_proportions(alloc: np.ndarray, alpha, rng: np.random.Generator, K: int | None = None) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    K = alpha.size if K is None else K
    counts = np.bincount(np.asarray(alloc, dtype=np.int64), minlength=K)
    return sample_dirichlet(alpha + counts, rng)


def update_cluster_params(state: SweepState, model: Model, rng: np.random.Generator):
    """Conjugate draws of ``(mu_k, Psi_k)``; empty components draw from the prior."""
    mix = state.mixture
    q, K = model.q, model.K
    pr = model.priors
    df0 = pr.psi_dof(q)
    S0 = pr.psi_scale * np.eye(q)
    mu = np.empty((K, q))
    Psi = np.empty((K, q, q))
    for k in range(K):
        g = state.gamma[mix.alloc == k]
        n = g.shape[0]
        lam = np.linalg.inv(mix.Psi[k])
        Q = np.eye(q) / pr.mu_var + n * lam
        lin = lam @ g.sum(axis=0)
        L = np.linalg.cholesky(Q)
        mu[k] = np.linalg.solve(Q, lin) + np.linalg.solve(L.T, rng.standard_normal(q))
        dev = g - mu[k]
        Psi[k] = sample_inverse_wishart(df0 + n, S0 + dev.T @ dev, rng)
    return mu, Psi


# ------------------------------------------------------------------ #
# Sweep
# ------------------------------------------------------------------ #


def _mh_target(key: str, dim: int) -> float:
    return 0.44 if dim == 1 else 0.234


def adapt_scales(state: SweepState, model: Model, iteration: int) -> dict[str, float]:
    """Robbins-Monro step on log proposal scales toward the target acceptance."""
    out = dict(state.mh_scale)
    step = min(0.5, 5.0 / np.sqrt(iteration + 1.0))
    for key, acc in state.mh_accept.items():
        pd = model.part(key.rsplit(".", 1)[0])
        dim = model.P if key.endswith(".beta") else pd.re.stop - pd.re.start
        out[key] = float(np.exp(np.log(out.get(key, 0.5)) + step * (acc - _mh_target(key, dim))))
    return out


def sweep(
    state: SweepState,
    model: Model,
    rng: np.random.Generator,
    *,
    adapt: bool = False,
    iteration: int = 0,
    blocks: Sequence[str] = SWEEP_BLOCKS,
) -> tuple[SweepState, dict[str, float]]:
    """One deterministic scan over every parameter block.

    Order: augmentations, random effects, fixed effects with shrinkage,
    residual variances, allocations, mixing weights, component parameters.
    Returns the new state and per-block wall-clock seconds.
    """
    st = state.copy()
    timing = {}

    def run(block, fn):
        t0 = time.perf_counter()
        try:
            fn()
        except KernelError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with block context
            raise KernelError(block, f"{type(exc).__name__}: {exc}") from exc
        timing[block] = time.perf_counter() - t0

    def augment():
        st.zip_w = augment_zip_indicators(st, model, rng)
        st.ystar = augment_tobit(st, model, rng)
        omega = dict(st.omega)
        for pd in model.parts:
            if pd.part.link == "logit":
                omega[pd.key] = augment_logistic_pg(pd, st, model, rng)
        st.omega = omega

    def random_effects():
        st.gamma, acc = update_random_effects(st, model, rng)
        st.mh_accept.update(acc)

    def fixed_effects():
        shrink = dict(st.shrinkage)
        for pd in model.parts:
            if pd.part.link == "log":
                key = f"{pd.key}.beta"
                shrink[pd.key], st.mh_accept[key] = update_poisson_coefficients(
                    pd, st, model, rng, st.mh_scale.get(key, 1.0)
                )
            else:
                shrink[pd.key] = update_fixed_effects_balasso(pd, st, model, rng)
            st.shrinkage = shrink

    def sigma2():
        pr = model.priors
        out = dict(st.sigma2)
        for name in model.sigma_features:
            out[name] = update_sigma2(sigma_residuals(name, st, model), pr.sigma_shape, pr.sigma_rate, rng)
        st.sigma2 = out

    def allocations():
        alloc, probs = update_allocations(st, model, rng)
        st.mixture = dataclasses.replace(st.mixture, alloc=alloc)
        st.membership = probs

    def mixing():
        alpha = np.full(model.K, model.priors.dirichlet)
        st.mixture = dataclasses.replace(st.mixture, pi=update_mixing_proportions(st.mixture.alloc, alpha, rng))

    def cluster_params():
        mu, Psi = update_cluster_params(st, model, rng)
        st.mixture = dataclasses.replace(st.mixture, mu=mu, Psi=Psi)

    table = {
        "augment": augment,
        "random_effects": random_effects,
        "fixed_effects": fixed_effects,
        "sigma2": sigma2,
        "allocations": allocations,
        "mixing": mixing,
        "cluster_params": cluster_params,
    }
    for block in SWEEP_BLOCKS:
        if block in blocks:
            run(block, table[block])
    if adapt:
        st.mh_scale = adapt_scales(st, model, iteration)
    return st, timing


# ------------------------------------------------------------------ #
# Likelihood and joint density
# ------------------------------------------------------------------ #


def feature_etas(name: str, state: SweepState, model: Model, shrinkage=None, gamma=None) -> dict[str, np.ndarray]:
    """Linear predictors of every part of a feature over all of its rows."""
    shrinkage = state.shrinkage if shrinkage is None else shrinkage
    gamma = state.gamma if gamma is None else gamma
    f = model.ds.feature(name)
    out = {}
    for role, pd in model.feature_parts(name).items():
        full = dataclasses.replace(pd, X=f.X, Z=f.Z, subject=f.subject, y=f.y, rows=np.arange(f.y.size))
        out[role] = part_eta(full, shrinkage[pd.key].beta, gamma)
    return out


def loglik_cells(state: SweepState, model: Model) -> dict[str, np.ndarray]:
    """Observed-data log-likelihood of every cell, keyed by feature."""
    out = {}
    for f, fam in zip(model.ds.features, model.families):
        etas = feature_etas(f.name, state, model)
        out[f.name] = cell_loglik(fam.kind, f.y, etas, state.sigma2.get(f.name))
    return out


def _invwishart_logpdf(Psi, df, S):
    q = S.shape[0]
    _, logdet_psi = np.linalg.slogdet(Psi)
    _, logdet_s = np.linalg.slogdet(S)
    return (
        0.5 * df * logdet_s
        - 0.5 * df * q * np.log(2.0)
        - multigammaln(0.5 * df, q)
        - 0.5 * (df + q + 1) * logdet_psi
        - 0.5 * np.trace(S @ np.linalg.inv(Psi))
    )


def log_joint(state: SweepState, model: Model) -> float:
    """Unnormalized joint log-posterior of the non-augmented parameters."""
    pr = model.priors
    mix = state.mixture
    q, K = model.q, model.K
    total = sum(float(v.sum()) for v in loglik_cells(state, model).values())
    total += float(component_logdens(state.gamma, mix.mu, mix.Psi)[np.arange(model.m), mix.alloc].sum())
    with np.errstate(divide="ignore"):
        total += float(np.log(mix.pi)[mix.alloc].sum())
        total += float(((pr.dirichlet - 1.0) * np.log(mix.pi)).sum())
    total += float(-0.5 * (mix.mu**2).sum() / pr.mu_var)
    S0 = pr.psi_scale * np.eye(q)
    total += float(sum(_invwishart_logpdf(mix.Psi[k], pr.psi_dof(q), S0) for k in range(K)))
    for sh in state.shrinkage.values():
        total += float(np.sum(-0.5 * np.log(sh.tau2) - 0.5 * sh.beta**2 / sh.tau2))
        total += float(np.sum(np.log(0.5 * sh.lam2) - 0.5 * sh.lam2 * sh.tau2))
        total += float(np.sum((pr.lasso_a - 1.0) * np.log(sh.lam2) - pr.lasso_b * sh.lam2))
    for s2 in state.sigma2.values():
        total += float(-(pr.sigma_shape + 1.0) * np.log(s2) - pr.sigma_rate / s2)
    return total
