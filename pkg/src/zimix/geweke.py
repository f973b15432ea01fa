"""Joint-distribution ("getting it right") checks of the Gibbs kernels.

A toy model with proper, light-tailed priors is simulated two ways:

* marginal-conditional: parameters from the prior, then data (and the
  augmentation variables) given the parameters, independently each time;
* successive-conditional: alternate one full sweep of the sampler with a
  fresh data draw given the current parameters.

Both target the joint prior-predictive distribution, so first and second
moments of every parameter must agree. :func:`one_step` is the per-kernel
version: a single kernel is applied to exact joint draws and must leave the
marginal law of the parameters it updates unchanged.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .diagnostics import effective_sample_size
from .distributions import make_rng, sample_inverse_wishart, sample_polya_gamma
from .kernels import SWEEP_BLOCKS, Model, SweepState, part_eta, sweep
from .model import FamilySpec, FeatureData, LongitudinalDataset, MixtureState, Priors, ShrinkageState

__all__ = [
    "GewekeToy",
    "toy_priors",
    "draw_parameters",
    "draw_data",
    "joint_draw",
    "statistics",
    "marginal_conditional",
    "successive_conditional",
    "one_step",
    "compare",
    "Comparison",
    "BLOCK_STATS",
]


def toy_priors(q: int) -> Priors:
    """Priors with finite moments of order well above four for every parameter."""
    df = q + 15.0
    return Priors(
        mu_var=1.0,
        psi_df=df,
        psi_scale=df - q - 1.0,  # prior mean of Psi_k is I
        dirichlet=1.0,
        sigma_shape=8.0,
        sigma_rate=7.0,
        lasso_a=10.0,
        lasso_b=10.0,
    )


@dataclass(frozen=True)
class GewekeToy:
    """Fixed design of a small model: ``m`` individuals with ``T`` waves each."""

    families: tuple[FamilySpec, ...]
    K: int = 2
    m: int = 5
    T: int = 4
    P: int = 2
    design_seed: int = 12345
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        fams = tuple(f if isinstance(f, FamilySpec) else FamilySpec(f) for f in self.families)
        object.__setattr__(self, "families", fams)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"y{r + 1}" for r in range(len(fams))))

    @property
    def q(self) -> int:
        return sum(f.re_dim(1) for f in self.families)

    @property
    def priors(self) -> Priors:
        return toy_priors(self.q)

    def design(self):
        rng = make_rng(self.design_seed, 0)
        Xi = rng.standard_normal((self.m, self.P))
        subject = np.repeat(np.arange(self.m), self.T)
        time = np.tile(np.arange(1, self.T + 1), self.m)
        return Xi[subject], (time / self.T)[:, None], subject, time

    def dataset(self, ys: Sequence[np.ndarray]) -> LongitudinalDataset:
        X, Z, subject, time = self.design()
        feats = tuple(FeatureData(n, np.asarray(y, dtype=float), X, Z, subject, time) for n, y in zip(self.names, ys))
        return LongitudinalDataset(
            ids=tuple(range(1, self.m + 1)),
            covariates=tuple(f"x{j + 1}" for j in range(self.P)),
            re_covariates=("t",),
            features=feats,
        )

    def model(self, ys: Sequence[np.ndarray]) -> Model:
        return Model.build(self.dataset(ys), self.families, self.K, self.priors)


def draw_parameters(toy: GewekeToy, model: Model, rng: np.random.Generator) -> SweepState:
    """A draw of every parameter from the prior (augmentations left empty)."""
    pr = model.priors
    q, K, m = model.q, toy.K, toy.m
    pi = rng.dirichlet(np.full(K, pr.dirichlet))
    alloc = rng.choice(K, size=m, p=pi)
    mu = np.sqrt(pr.mu_var) * rng.standard_normal((K, q))
    Psi = np.stack([sample_inverse_wishart(pr.psi_dof(q), pr.psi_scale * np.eye(q), rng) for _ in range(K)])
    chol = np.linalg.cholesky(Psi)
    gamma = mu[alloc] + np.einsum("ijk,ik->ij", chol[alloc], rng.standard_normal((m, q)))
    shrinkage = {}
    for pd in model.parts:
        lam2 = rng.gamma(pr.lasso_a, 1.0 / pr.lasso_b, size=toy.P)
        tau2 = rng.exponential(2.0 / lam2)
        beta = np.sqrt(tau2) * rng.standard_normal(toy.P)
        shrinkage[pd.key] = ShrinkageState(beta, tau2, lam2)
    sigma2 = {name: float(pr.sigma_rate / rng.gamma(pr.sigma_shape)) for name in model.sigma_features}
    state = SweepState(
        mixture=MixtureState(pi, alloc.astype(np.int64), mu, Psi),
        gamma=gamma,
        shrinkage=shrinkage,
        sigma2=sigma2,
    )
    for pd in model.parts:
        if pd.part.link == "log":
            state.mh_scale[f"{pd.key}.beta"] = 1.7
            if pd.re is not None:
                state.mh_scale[f"{pd.key}.re"] = 1.2
    return state


def draw_data(toy: GewekeToy, model: Model, state: SweepState, rng: np.random.Generator):
    """Responses and augmentation variables given the parameters.

    ``model`` only supplies the (fixed) design. Returns the new model and a
    copy of ``state`` with ``ystar``, ``omega`` and ``zip_w`` filled in.
    """
    st = state.copy()
    ys = []
    ystar, omega, zip_w = {}, {}, {}
    for name, fam in zip(toy.names, toy.families):
        f = model.ds.feature(name)
        full = {}
        for role, pd in model.feature_parts(name).items():
            # evaluate every part on all rows of the feature
            whole = replace(pd, X=f.X, Z=f.Z, subject=f.subject, y=f.y, rows=np.arange(f.y.size))
            full[role] = part_eta(whole, st.beta(pd.key), st.gamma)
        n = f.y.size
        if fam.kind == "gaussian":
            y = full["mean"] + np.sqrt(st.sigma2[name]) * rng.standard_normal(n)
        elif fam.kind == "tobit":
            latent = full["mean"] + np.sqrt(st.sigma2[name]) * rng.standard_normal(n)
            y = np.maximum(latent, 0.0)
            ystar[name] = latent
        elif fam.kind == "twopart":
            omega[f"{name}.zero"] = sample_polya_gamma(np.ones(n), full["zero"], rng)
            zero = rng.random(n) < expit(full["zero"])
            pos = np.exp(full["pos"] + np.sqrt(st.sigma2[name]) * rng.standard_normal(n))
            y = np.where(zero, 0.0, pos)
        else:
            omega[f"{name}.zero"] = sample_polya_gamma(np.ones(n), full["zero"], rng)
            w = rng.random(n) < expit(full["zero"])
            counts = rng.poisson(np.exp(full["count"])).astype(float)
            y = np.where(w, 0.0, counts)
            zip_w[name] = w.astype(np.int8)
        ys.append(y)
    st.ystar, st.omega, st.zip_w = ystar, omega, zip_w
    return toy.model(ys), st


def joint_draw(toy: GewekeToy, rng: np.random.Generator, base: Model | None = None):
    base = base if base is not None else _base_model(toy)
    state = draw_parameters(toy, base, rng)
    return draw_data(toy, base, state, rng)


def _base_model(toy: GewekeToy) -> Model:
    n = toy.m * toy.T
    # positive placeholder responses so every part has rows
    return toy.model([np.ones(n)] * len(toy.families))


# what each sweep block updates, as prefixes of the statistic names
BLOCK_STATS = {
    "augment": ("ystar.", "omega.", "w."),
    "random_effects": ("gamma.",),
    "fixed_effects": ("beta.", "tau2.", "lam2."),
    "sigma2": ("sigma2.",),
    "allocations": ("alloc.",),
    "mixing": ("pi.",),
    "cluster_params": ("mu.", "Psi."),
}


def statistics(state: SweepState, model: Model, latents: bool = True) -> dict[str, float]:
    """Scalar summaries of a state: every parameter plus the first cell's latents."""
    out = {}
    for key, sh in state.shrinkage.items():
        for j in range(sh.beta.size):
            out[f"beta.{key}.{j}"] = sh.beta[j]
            out[f"tau2.{key}.{j}"] = sh.tau2[j]
            out[f"lam2.{key}.{j}"] = sh.lam2[j]
    for name, s2 in state.sigma2.items():
        out[f"sigma2.{name}"] = s2
    mix = state.mixture
    q = mix.mu.shape[1]
    for k in range(mix.pi.size):
        out[f"pi.{k}"] = mix.pi[k]
        for a in range(q):
            out[f"mu.{k}.{a}"] = mix.mu[k, a]
            for b in range(a, q):
                out[f"Psi.{k}.{a}.{b}"] = mix.Psi[k, a, b]
    for a in range(q):
        out[f"gamma.0.{a}"] = state.gamma[0, a]
    out["alloc.0"] = float(mix.alloc[0])
    if latents:
        for name, v in state.ystar.items():
            out[f"ystar.{name}.0"] = v[0]
        for key, v in state.omega.items():
            out[f"omega.{key}.0"] = v[0]
        for name, v in state.zip_w.items():
            out[f"w.{name}.0"] = float(v[0])
    return {k: float(v) for k, v in out.items()}


def _stack(rows: list[dict]) -> dict[str, np.ndarray]:
    return {k: np.array([r[k] for r in rows]) for k in rows[0]}


def marginal_conditional(toy: GewekeToy, n: int, seed: int = 0) -> dict[str, np.ndarray]:
    rng = make_rng(seed, 0)
    base = _base_model(toy)
    rows = []
    for _ in range(n):
        model, state = joint_draw(toy, rng, base)
        rows.append(statistics(state, model, latents=False))
    return _stack(rows)


def successive_conditional(toy: GewekeToy, n: int, seed: int = 0) -> dict[str, np.ndarray]:
    """``n`` states of the sweep-then-redraw-data chain, started from a joint draw."""
    rng = make_rng(seed, 1)
    base = _base_model(toy)
    model, state = joint_draw(toy, rng, base)
    rows = []
    for _ in range(n):
        state, _ = sweep(state, model, rng)
        model, state = draw_data(toy, base, state, rng)
        rows.append(statistics(state, model, latents=False))
    return _stack(rows)


def one_step(toy: GewekeToy, block: str, n: int, seed: int = 0):
    """Apply one kernel to ``n`` exact joint draws.

    Returns ``(before, after)`` statistics of the quantities ``block``
    updates; under a correct kernel both have the same distribution.
    """
    if block not in SWEEP_BLOCKS:
        raise ValueError(f"unknown block {block!r}")
    rng = make_rng(seed, 2)
    base = _base_model(toy)
    prefixes = BLOCK_STATS[block]
    before, after = [], []
    for _ in range(n):
        model, state = joint_draw(toy, rng, base)
        new, _ = sweep(state, model, rng, blocks=(block,))
        b = statistics(state, model)
        a = statistics(new, model)
        before.append({k: v for k, v in b.items() if k.startswith(prefixes)})
        after.append({k: v for k, v in a.items() if k.startswith(prefixes)})
    return _stack(before), _stack(after)


# ------------------------------------------------------------------ #
# Comparison
# ------------------------------------------------------------------ #


def _chain_se(x: np.ndarray) -> float:
    """Standard error of the mean of an autocorrelated series, via its ESS."""
    if np.ptp(x) == 0:
        return 0.0
    return float(x.std(ddof=1) / np.sqrt(effective_sample_size(x[None, :])))


@dataclass(frozen=True)
class Comparison:
    stat: str
    moment: int
    a: float
    b: float
    z: float


def compare(
    a: dict[str, np.ndarray],
    b: dict[str, np.ndarray],
    *,
    paired: bool = False,
    autocorrelated: bool = False,
    moments: Sequence[int] = (1, 2),
) -> list[Comparison]:
    """z-scores of the difference in first and second moments.

    ``paired`` compares ``b - a`` draw by draw (one-step tests).
    Otherwise the samples are independent; with ``autocorrelated`` the
    standard error of ``b`` uses its effective sample size.
    Differences that are identically zero get ``z = 0``.
    """
    out = []
    for k in a:
        for p in moments:
            if p == 2 and k.startswith(("alloc.", "w.")):
                continue  # indicators: second moment repeats the first
            ga, gb = a[k] ** p, b[k] ** p
            if paired:
                d = gb - ga
                se = d.std(ddof=1) / np.sqrt(d.size)
                diff = d.mean()
            else:
                se_a = ga.std(ddof=1) / np.sqrt(ga.size)
                se_b = _chain_se(gb) if autocorrelated else gb.std(ddof=1) / np.sqrt(gb.size)
                se = np.hypot(se_a, se_b)
                diff = gb.mean() - ga.mean()
            z = 0.0 if se == 0 and diff == 0 else float(diff / se)
            out.append(Comparison(k, p, float(ga.mean()), float(gb.mean()), z))
    return out
