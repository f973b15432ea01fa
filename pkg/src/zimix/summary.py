"""Posterior summaries: coefficient tables, variable selection and trajectories."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .diagnostics import relabel
from .engine import ChainOutput
from .kernels import Model

__all__ = [
    "CoefficientSummary",
    "summarize_parameters",
    "selection_table",
    "cluster_selection_table",
    "trajectory_table",
    "LEVEL",
]

LEVEL = 0.95


@dataclass(frozen=True)
class CoefficientSummary:
    param: str
    mean: float
    median: float
    lower: float
    upper: float

    @property
    def selected(self) -> bool:
        """The equal-tailed interval excludes zero."""
        return self.lower > 0.0 or self.upper < 0.0


def _interval(x: np.ndarray, level: float = LEVEL) -> tuple[float, float]:
    a = 0.5 * (1.0 - level)
    lo, hi = np.quantile(x, [a, 1.0 - a])
    return float(lo), float(hi)


def summarize_parameters(chains: Sequence[ChainOutput], level: float = LEVEL) -> list[CoefficientSummary]:
    """Posterior mean, median and equal-tailed interval of every scalar trace, pooled over chains."""
    chains = relabel(chains)
    traces = [c.params() for c in chains]
    out = []
    for name in traces[0]:
        x = np.concatenate([t[name] for t in traces])
        lo, hi = _interval(x, level)
        out.append(CoefficientSummary(name, float(x.mean()), float(np.median(x)), lo, hi))
    return out


def selection_table(summaries: Sequence[CoefficientSummary]) -> list[tuple[str, str, bool]]:
    """``(part, covariate, selected)`` for every fixed-effect coefficient."""
    rows = []
    for s in summaries:
        part, sep, cov = s.param.partition(".beta.")
        if sep:
            rows.append((part, cov, s.selected))
    return rows


def cluster_selection_table(
    chains: Sequence[ChainOutput], level: float = LEVEL
) -> list[tuple[int, str, str, float, float, float, bool]]:
    """Cluster-specific effects and their selection.

    Fixed effects are shared by all clusters and random-effect covariates act
    through the cluster means, so the cluster-specific coefficient of a
    random-effect covariate ``c`` on part ``p`` is ``mu_k[p.c]``. Rows are
    ``(cluster, part, covariate, mean, lower, upper, selected)`` with
    1-based clusters after relabeling.
    """
    chains = relabel(chains)
    mu = np.concatenate([c.mu for c in chains])
    re_names = chains[0].re_names
    rows = []
    for k in range(chains[0].K):
        for a, name in enumerate(re_names):
            part, _, cov = name.rpartition(".")
            x = mu[:, k, a]
            lo, hi = _interval(x, level)
            rows.append((k + 1, part, cov, float(x.mean()), lo, hi, bool(lo > 0 or hi < 0)))
    return rows


def trajectory_table(
    chains: Sequence[ChainOutput], model: Model, level: float = LEVEL
) -> list[tuple]:
    """Cluster-conditional mean linear predictor by wave.

    For cluster ``k`` and each part, the predictor at wave ``t`` is the
    average covariate row of that wave times ``beta`` plus the average
    random-effect covariates times the cluster mean ``mu_k``. Rows are
    ``(cluster, part, link, wave, mean, lower, upper)``.
    """
    chains = relabel(chains)
    mu = np.concatenate([c.mu for c in chains])
    rows = []
    for f in model.ds.features:
        waves = np.unique(f.time)
        xbar = np.stack([f.X[f.time == t].mean(axis=0) for t in waves])
        zbar = np.stack([f.Z[f.time == t].mean(axis=0) for t in waves])
        for role, pd in model.feature_parts(f.name).items():
            beta = np.concatenate([c.beta[pd.key] for c in chains])
            fixed = beta @ xbar.T
            for k in range(chains[0].K):
                eta = fixed
                if pd.re is not None:
                    eta = fixed + mu[:, k, pd.re] @ zbar.T
                for j, t in enumerate(waves):
                    lo, hi = _interval(eta[:, j], level)
                    rows.append((k + 1, pd.key, pd.part.link, t, float(eta[:, j].mean()), lo, hi))
    return rows
