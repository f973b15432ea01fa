"""Model choice, convergence diagnostics and cluster-recovery scores."""

from __future__ import annotations

import dataclasses
import itertools
import json
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, log_ndtr, logsumexp, ndtr

from .engine import ChainOutput
from .kernels import Model, SweepState, loglik_cells
from .model import cell_loglik

__all__ = [
    "PedReport",
    "DiagnosticsReport",
    "DiagnosticsError",
    "compute_deviance",
    "compute_ped",
    "cell_kl",
    "gelman_rubin",
    "effective_sample_size",
    "relabel",
    "relabel_permutation",
    "posterior_membership",
    "adjusted_rand_index",
    "diagnose",
    "ESTIMATORS",
]

ESTIMATORS = ("paired-chain", "two-pD")
MIN_WEIGHT_ESS = 10.0
RHAT_FLOOR = 0.99


class DiagnosticsError(ValueError):
    pass


# ------------------------------------------------------------------ #
# Deviance
# ------------------------------------------------------------------ #


def compute_deviance(state: SweepState, model: Model) -> float:
    """``-2`` times the summed observed-data log-likelihood, given the random effects."""
    total = sum(float(v.sum()) for v in loglik_cells(state, model).values())
    if not np.isfinite(total):
        raise DiagnosticsError("non-finite log-likelihood")
    return -2.0 * total


def _draw_etas(model: Model, beta: dict, gamma: np.ndarray) -> dict[str, dict[str, np.ndarray]]:
    """Linear predictors of every cell for a stack of draws.

    ``beta[key]`` has shape ``(n, P)`` and ``gamma`` shape ``(n, m, q)``;
    results have shape ``(n, cells)``.
    """
    out: dict[str, dict[str, np.ndarray]] = {}
    for f in model.ds.features:
        etas = {}
        for role, pd in model.feature_parts(f.name).items():
            eta = beta[pd.key] @ f.X.T
            if pd.re is not None:
                g = gamma[:, f.subject, pd.re]
                eta = eta + np.einsum("cs,ncs->nc", f.Z, g)
            etas[role] = eta
        out[f.name] = etas
    return out


def _draw_loglik(model: Model, etas, sigma2: dict) -> dict[str, np.ndarray]:
    out = {}
    for f, fam in zip(model.ds.features, model.families):
        s2 = sigma2.get(f.name)
        s2 = None if s2 is None else np.asarray(s2, dtype=float)[:, None]
        out[f.name] = cell_loglik(fam.kind, f.y[None, :], etas[f.name], s2)
    return out


# ------------------------------------------------------------------ #
# Predictive divergences
# ------------------------------------------------------------------ #


def _kl_normal(ma, va, mb, vb):
    return 0.5 * (np.log(vb / va) + (va + (ma - mb) ** 2) / vb - 1.0)


def _kl_bernoulli(log_pa, log_qa, log_pb, log_qb):
    """KL between Bernoulli laws given log P(1) and log P(0) of each."""
    return np.exp(log_pa) * (log_pa - log_pb) + np.exp(log_qa) * (log_qa - log_qb)


def _kl_tobit(ma, va, mb, vb):
    sa = np.sqrt(va)
    alpha = ma / sa
    log_p0a, log_p0b = log_ndtr(-alpha), log_ndtr(-mb / np.sqrt(vb))
    mass = ndtr(alpha)
    phi = np.exp(-0.5 * alpha**2) / np.sqrt(2.0 * np.pi)
    e1 = mass * ma + sa * phi
    e2 = (ma**2 + va) * mass + sa * phi * ma

    def sq(m):
        return e2 - 2.0 * m * e1 + m**2 * mass

    cont = mass * 0.5 * np.log(vb / va) - sq(ma) / (2.0 * va) + sq(mb) / (2.0 * vb)
    return np.exp(log_p0a) * (log_p0a - log_p0b) + cont


def _kl_zip(eza, eca, ezb, ecb):
    la, lb = np.exp(eca), np.exp(ecb)
    log_pa, log_qa = log_expit(eza), log_expit(-eza)
    log_pb, log_qb = log_expit(ezb), log_expit(-ezb)
    log_p0a = np.logaddexp(log_pa, log_qa - la)
    log_p0b = np.logaddexp(log_pb, log_qb - lb)
    pos_mass = -np.expm1(-la)
    pos = pos_mass * (log_qa - log_qb) + la * (eca - ecb) - (la - lb) * pos_mass
    return np.exp(log_p0a) * (log_p0a - log_p0b) + np.exp(log_qa) * pos


def cell_kl(kind: str, etas_a: dict, etas_b: dict, sigma2_a=None, sigma2_b=None) -> np.ndarray:
    """KL divergence from the cell predictive law under ``a`` to that under ``b``."""
    if kind == "gaussian":
        return _kl_normal(etas_a["mean"], sigma2_a, etas_b["mean"], sigma2_b)
    if kind == "tobit":
        return _kl_tobit(etas_a["mean"], sigma2_a, etas_b["mean"], sigma2_b)
    if kind == "twopart":
        za, zb = etas_a["zero"], etas_b["zero"]
        bern = _kl_bernoulli(log_expit(za), log_expit(-za), log_expit(zb), log_expit(-zb))
        return bern + expit(-za) * _kl_normal(etas_a["pos"], sigma2_a, etas_b["pos"], sigma2_b)
    if kind == "zip":
        return _kl_zip(etas_a["zero"], etas_a["count"], etas_b["zero"], etas_b["count"])
    raise ValueError(f"unknown family {kind!r}")


# ------------------------------------------------------------------ #
# Penalized expected deviance
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class PedReport:
    k: int
    dbar: float
    popt: float
    estimator: str
    min_weight_ess: float = float("nan")
    flags: tuple[str, ...] = ()

    @property
    def ped(self) -> float:
        return self.dbar + self.popt

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "ped": self.ped,
            "dbar": self.dbar,
            "popt": self.popt,
            "estimator": self.estimator,
            "min_weight_ess": self.min_weight_ess,
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PedReport":
        return cls(int(d["k"]), float(d["dbar"]), float(d["popt"]), d["estimator"],
                   float(d.get("min_weight_ess", "nan")), tuple(d.get("flags", ())))


def _posterior_mean_deviance(chains: Sequence[ChainOutput], model: Model) -> float:
    beta = {k: np.concatenate([c.beta[k] for c in chains]).mean(axis=0, keepdims=True) for k in chains[0].beta}
    gamma = np.concatenate([c.gamma for c in chains]).mean(axis=0, keepdims=True)
    sigma2 = {k: [np.concatenate([c.sigma2[k] for c in chains]).mean()] for k in chains[0].sigma2}
    ll = _draw_loglik(model, _draw_etas(model, beta, gamma), sigma2)
    total = sum(float(v.sum()) for v in ll.values())
    if not np.isfinite(total):
        raise DiagnosticsError("non-finite log-likelihood at the posterior mean")
    return -2.0 * total


def _paired_optimism(chains: Sequence[ChainOutput], model: Model, block: int = 50) -> tuple[float, float]:
    """Importance-weighted expected Jeffreys divergence between paired chain draws.

    For each chain pair and each aligned draw index, the cell-level
    symmetric KL divergence ``J`` is weighted by ``1 / (p(y|a) p(y|b))``.
    Returns the optimism summed over cells and the smallest per-cell
    effective sample size of the weights.
    """
    n = min(c.n_draws for c in chains)
    kinds = {f.name: fam.kind for f, fam in zip(model.ds.features, model.families)}
    log_wsum: dict[str, list] = {f: [] for f in kinds}
    log_w2sum: dict[str, list] = {f: [] for f in kinds}
    log_wj: dict[str, list] = {f: [] for f in kinds}
    tiny = np.finfo(float).tiny
    for ca, cb in itertools.combinations(chains, 2):
        for start in range(0, n, block):
            sl = slice(start, min(n, start + block))
            ea = _draw_etas(model, {k: v[sl] for k, v in ca.beta.items()}, ca.gamma[sl])
            eb = _draw_etas(model, {k: v[sl] for k, v in cb.beta.items()}, cb.gamma[sl])
            sa = {k: v[sl] for k, v in ca.sigma2.items()}
            sb = {k: v[sl] for k, v in cb.sigma2.items()}
            la, lb = _draw_loglik(model, ea, sa), _draw_loglik(model, eb, sb)
            for name, kind in kinds.items():
                s2a = sa[name][:, None] if name in sa else None
                s2b = sb[name][:, None] if name in sb else None
                jd = cell_kl(kind, ea[name], eb[name], s2a, s2b) + cell_kl(kind, eb[name], ea[name], s2b, s2a)
                jd = np.maximum(jd, 0.0)
                logw = -(la[name] + lb[name])
                log_wsum[name].append(logsumexp(logw, axis=0))
                log_w2sum[name].append(logsumexp(2.0 * logw, axis=0))
                log_wj[name].append(logsumexp(logw + np.log(jd + tiny), axis=0))
    popt = 0.0
    min_ess = np.inf
    for name in kinds:
        lw = logsumexp(np.vstack(log_wsum[name]), axis=0)
        lw2 = logsumexp(np.vstack(log_w2sum[name]), axis=0)
        lwj = logsumexp(np.vstack(log_wj[name]), axis=0)
        popt += float(np.exp(lwj - lw).sum())
        min_ess = min(min_ess, float(np.exp(2.0 * lw - lw2).min()))
    return popt, min_ess


def compute_ped(
    chains: Sequence[ChainOutput], model: Model, estimator: str = "paired-chain"
) -> PedReport:
    """Penalized expected deviance ``PED = Dbar + p_opt``.

    ``"paired-chain"`` pairs aligned draws of every two chains and averages
    the cell-level symmetric KL divergence of the predictive laws under
    cross-validation importance weights. Cells whose weights have an
    effective sample size below 10 raise the ``"weight-degenerate"`` flag.
    ``"two-pD"`` sets ``p_opt = 2 (Dbar - D(theta_hat))`` with ``theta_hat``
    the pooled posterior mean, clamped at zero (flagged when clamped).
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    chains = list(chains)
    if not chains:
        raise DiagnosticsError("no chains supplied")
    dbar = float(np.concatenate([c.deviance for c in chains]).mean())
    K = chains[0].K
    if estimator == "two-pD":
        d_hat = _posterior_mean_deviance(chains, model)
        popt = 2.0 * (dbar - d_hat)
        flags = ()
        if popt < 0:
            popt, flags = 0.0, ("negative-pd-clamped",)
        return PedReport(K, dbar, popt, estimator, flags=flags)
    if len(chains) < 2:
        raise DiagnosticsError("the paired-chain estimator needs at least two chains")
    popt, ess = _paired_optimism(chains, model)
    flags = ("weight-degenerate",) if ess < MIN_WEIGHT_ESS else ()
    if flags:
        warnings.warn(f"importance weights degenerate (min ESS {ess:.1f}) at K={K}", RuntimeWarning, stacklevel=2)
    return PedReport(K, dbar, popt, estimator, ess, flags)


# ------------------------------------------------------------------ #
# Convergence
# ------------------------------------------------------------------ #


def gelman_rubin(draws) -> tuple[float, bool]:
    """Split-chain potential scale reduction factor.

    ``draws`` is ``(chains, n)``. Each chain is halved; returns
    ``(rhat, degenerate)`` where ``degenerate`` marks zero within-chain
    variance (``rhat`` is then NaN).
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 10:
        raise DiagnosticsError("need at least 2 chains of at least 10 draws")
    half = x.shape[1] // 2
    split = np.vstack([x[:, :half], x[:, x.shape[1] - half:]])
    n = split.shape[1]
    W = split.var(axis=1, ddof=1).mean()
    B = n * split.mean(axis=1).var(ddof=1)
    scale = max(np.abs(split).max(), 1.0)
    if W <= (1e-14 * scale) ** 2:
        return float("nan"), True
    return float(np.sqrt(((n - 1) / n * W + B / n) / W)), False


def _autocov(x):
    n = x.size
    f = np.fft.rfft(x - x.mean(), n=2 * n)
    return np.fft.irfft(f * np.conj(f))[:n] / n


def effective_sample_size(draws) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence truncation."""
    x = np.atleast_2d(np.asarray(draws, dtype=float))
    M, n = x.shape
    if n < 4:
        return float(M * n)
    acov = np.array([_autocov(c) for c in x])
    W = acov[:, 0].mean() * n / (n - 1)
    if W <= 0:
        return float("nan")
    var_plus = W * (n - 1) / n + (x.mean(axis=1).var(ddof=1) if M > 1 else 0.0)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    tau = -1.0
    prev = np.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        tau += 2.0 * pair
        prev = pair
    return float(M * n / max(tau, 1.0 / np.log10(M * n + 10)))


@dataclass
class DiagnosticsReport:
    rhat: dict[str, float]
    ess: dict[str, float]
    acceptance: dict[str, dict[str, float]] = field(default_factory=dict)
    flags: dict[str, str] = field(default_factory=dict)

    @property
    def max_rhat(self) -> float:
        vals = [v for v in self.rhat.values() if np.isfinite(v)]
        return max(vals) if vals else float("nan")

    def exceeds(self, threshold: float = 1.1) -> list[str]:
        return [k for k, v in self.rhat.items() if np.isfinite(v) and v > threshold]

    def to_dict(self) -> dict:
        def clean(d):
            return {k: (None if not np.isfinite(v) else float(v)) for k, v in d.items()}

        return {
            "rhat": clean(self.rhat),
            "ess": clean(self.ess),
            "acceptance": {k: clean(v) for k, v in self.acceptance.items()},
            "flags": dict(self.flags),
            "max_rhat": None if not np.isfinite(self.max_rhat) else self.max_rhat,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiagnosticsReport":
        def restore(x):
            return {k: float("nan") if v is None else float(v) for k, v in x.items()}

        return cls(restore(d["rhat"]), restore(d["ess"]),
                   {k: restore(v) for k, v in d.get("acceptance", {}).items()}, dict(d.get("flags", {})))


def diagnose(chains: Sequence[ChainOutput], params: Sequence[str] | None = None) -> DiagnosticsReport:
    """R-hat and ESS for every scalar trace, after relabeling."""
    chains = relabel(chains)
    traces = [c.params() for c in chains]
    names = list(traces[0]) if params is None else list(params)
    rhat, ess, flags = {}, {}, {}
    for name in names:
        x = np.vstack([t[name] for t in traces])
        if len(chains) >= 2 and x.shape[1] >= 10:
            r, degenerate = gelman_rubin(x)
            if degenerate:
                flags[name] = "zero within-chain variance"
            elif r < RHAT_FLOOR:
                r = RHAT_FLOOR
        else:
            r = float("nan")
            flags[name] = "too few chains or draws"
        rhat[name] = r
        ess[name] = effective_sample_size(x)
    acceptance: dict[str, dict[str, float]] = {}
    for c in chains:
        for k, v in c.acceptance.items():
            acceptance.setdefault(k, {})[f"chain{c.chain_id}"] = v
    for k, v in acceptance.items():
        v["mean"] = float(np.mean(list(v.values())))
    return DiagnosticsReport(rhat, ess, acceptance, flags)


# ------------------------------------------------------------------ #
# Label switching and membership
# ------------------------------------------------------------------ #


def relabel_permutation(mu: np.ndarray) -> np.ndarray:
    """Per-draw component order by first, then second coordinate of ``mu``, then index.

    ``mu`` has shape ``(n, K, q)``; returns ``(n, K)`` with ``perm[d, j]``
    the old index of the component placed at position ``j``.
    """
    mu = np.asarray(mu)
    n, K, q = mu.shape
    idx = np.broadcast_to(np.arange(K), (n, K))
    keys = [idx]
    if q > 1:
        keys.append(mu[:, :, 1])
    keys.append(mu[:, :, 0])
    return np.lexsort(keys, axis=-1) if n else np.zeros((0, K), dtype=np.int64)


def relabel(chains: Sequence[ChainOutput]) -> list[ChainOutput]:
    """Permute component-indexed draws so the first ``mu`` coordinate ascends."""
    out = []
    for c in chains:
        perm = relabel_permutation(c.mu)
        rows = np.arange(c.n_draws)[:, None]
        inverse = np.argsort(perm, axis=1)
        out.append(
            dataclasses.replace(
                c,
                pi=c.pi[rows, perm],
                mu=c.mu[rows, perm],
                Psi=c.Psi[rows, perm],
                membership=np.take_along_axis(c.membership, perm[:, None, :], axis=2),
                alloc=np.take_along_axis(inverse, c.alloc, axis=1),
            )
        )
    return out


def posterior_membership(chains: Sequence[ChainOutput]) -> tuple[np.ndarray, np.ndarray]:
    """Relabeled allocation frequencies ``(m, K)`` and the 0-based hard assignment."""
    chains = relabel(chains)
    K = chains[0].K
    alloc = np.concatenate([c.alloc for c in chains])
    counts = np.stack([(alloc == k).sum(axis=0) for k in range(K)], axis=1)
    probs = counts / alloc.shape[0]
    return probs, np.argmax(probs, axis=1)


def adjusted_rand_index(assignment, truth) -> float:
    """Adjusted Rand index between two partitions given as label vectors."""
    a = np.asarray(assignment)
    b = np.asarray(truth)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("partitions must be 1-D label vectors of equal length")
    n = a.size
    if n < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return (x * (x - 1) / 2.0).sum()

    index = comb2(table)
    sa, sb = comb2(table.sum(axis=1)), comb2(table.sum(axis=0))
    expected = sa * sb / (n * (n - 1) / 2.0)
    top = 0.5 * (sa + sb)
    if top == expected:
        return 1.0 if index == top else 0.0
    return float((index - expected) / (top - expected))

