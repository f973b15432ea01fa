"""Domain types, random-effect layout and observed-data likelihoods.

A dataset holds ``R`` longitudinal features measured on ``m`` individuals.
Each feature is modelled by one response family; a family is made of one or
more *parts* (a linear predictor with its own coefficient block):

==========  =========================================  ===============
family      parts (role: link)                         residual scale
==========  =========================================  ===============
gaussian    mean: identity                             sigma2
tobit       mean: identity on the latent y*            sigma2
twopart     zero: logit P(y = 0); pos: identity on     sigma2
            log y for y > 0
zip         zero: logit P(structural zero);            none
            count: log Poisson rate
==========  =========================================  ===============

Parts flagged ``random`` carry a random-effect slice of the individual's
joint vector ``gamma_i``; the slice has one coefficient per random-effect
covariate.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np
from scipy.special import gammaln, log_expit, log_ndtr

__all__ = [
    "FAMILIES",
    "DatasetError",
    "IdentifiabilityError",
    "FamilyMismatchError",
    "FeatureData",
    "LongitudinalDataset",
    "FamilySpec",
    "Part",
    "RandomEffectsLayout",
    "Gaussian",
    "Tobit",
    "TwoPart",
    "Zip",
    "MixtureState",
    "ShrinkageState",
    "Priors",
    "ValidationReport",
    "validate_dataset",
    "linear_predictor",
    "log_likelihood",
    "cell_loglik",
]

FAMILIES = ("gaussian", "tobit", "twopart", "zip")
ZIP_VARIANTS = ("yau-lee", "hall")


class DatasetError(ValueError):
    """Structural problem with a dataset."""


class IdentifiabilityError(DatasetError):
    """Fixed- and random-effect designs share a variable."""


class FamilyMismatchError(DatasetError):
    """Responses outside the support of their declared family."""


# ------------------------------------------------------------------ #
# Dataset
# ------------------------------------------------------------------ #


@dataclass(frozen=True, eq=False)
class FeatureData:
    """Stacked long-format observations of one feature.

    Rows are grouped by individual (``subject`` is non-decreasing) and
    time-ordered within individual.
    """

    name: str
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    subject: np.ndarray
    time: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, FeatureData):
            return NotImplemented
        return self.name == other.name and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("y", "X", "Z", "subject", "time")
        )


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    ids: tuple
    covariates: tuple[str, ...]
    re_covariates: tuple[str, ...]
    features: tuple[FeatureData, ...]

    @property
    def m(self) -> int:
        return len(self.ids)

    @property
    def R(self) -> int:
        return len(self.features)

    @property
    def P(self) -> int:
        return len(self.covariates)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def feature(self, name: str) -> FeatureData:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def n_obs(self, r: int) -> np.ndarray:
        """Per-individual observation counts ``n_ir`` for feature ``r``."""
        return np.bincount(self.features[r].subject, minlength=self.m)

    def cell(self, i: int, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(y_ir, X_ir, z_ir)`` for individual ``i`` and feature ``r``."""
        f = self.features[r]
        rows = f.subject == i
        return f.y[rows], f.X[rows], f.Z[rows]

    def __eq__(self, other):
        if not isinstance(other, LongitudinalDataset):
            return NotImplemented
        return (
            tuple(self.ids) == tuple(other.ids)
            and self.covariates == other.covariates
            and self.re_covariates == other.re_covariates
            and self.features == other.features
        )


# ------------------------------------------------------------------ #
# Families, parts and the random-effect layout
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class Part:
    feature: str
    role: str
    link: str
    random: bool

    @property
    def key(self) -> str:
        return f"{self.feature}.{self.role}"


@dataclass(frozen=True)
class FamilySpec:
    """Structure of a response family, without parameter values.

    ``random_zero`` controls whether the logistic part of a two-part or ZIP
    family carries random effects; for ZIP it is implied by ``variant``
    (Yau-Lee: both parts, Hall: count part only).
    """

    kind: str
    variant: str | None = None
    random_zero: bool | None = None

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValueError(f"unknown family {self.kind!r}; expected one of {FAMILIES}")
        if self.kind == "zip":
            variant = self.variant or "yau-lee"
            if variant not in ZIP_VARIANTS:
                raise ValueError(f"unknown ZIP variant {variant!r}; expected one of {ZIP_VARIANTS}")
            implied = variant == "yau-lee"
            if self.random_zero is not None and self.random_zero != implied:
                raise ValueError(f"ZIP variant {variant!r} fixes random_zero={implied}")
            object.__setattr__(self, "variant", variant)
            object.__setattr__(self, "random_zero", implied)
        elif self.kind == "twopart":
            if self.variant is not None:
                raise ValueError("only ZIP families take a variant")
            object.__setattr__(self, "random_zero", True if self.random_zero is None else self.random_zero)
        elif self.variant is not None or self.random_zero is not None:
            raise ValueError(f"{self.kind} family takes no variant or zero-part options")

    @property
    def has_sigma(self) -> bool:
        return self.kind != "zip"

    def parts(self, feature: str) -> tuple[Part, ...]:
        if self.kind in ("gaussian", "tobit"):
            return (Part(feature, "mean", "identity", True),)
        if self.kind == "twopart":
            return (
                Part(feature, "zero", "logit", bool(self.random_zero)),
                Part(feature, "pos", "identity", True),
            )
        return (
            Part(feature, "zero", "logit", bool(self.random_zero)),
            Part(feature, "count", "log", True),
        )

    def re_dim(self, n_re_cov: int) -> int:
        return n_re_cov * sum(p.random for p in self.parts("_"))


@dataclass(frozen=True)
class RandomEffectsLayout:
    """Maps each random part to a contiguous slice of ``gamma_i``."""

    slices: dict[str, slice]
    q: int

    @classmethod
    def build(cls, parts: Sequence[Part], n_re_cov: int) -> "RandomEffectsLayout":
        slices = {}
        offset = 0
        for p in parts:
            if p.random:
                slices[p.key] = slice(offset, offset + n_re_cov)
                offset += n_re_cov
        return cls(slices, offset)

    def covers_exactly(self) -> bool:
        seen = np.zeros(self.q, dtype=int)
        for s in self.slices.values():
            seen[s] += 1
        return bool(np.all(seen == 1))


# Parameterised families, as used by ``log_likelihood``.


@dataclass(frozen=True)
class Gaussian:
    beta: np.ndarray
    sigma2: float
    kind: ClassVar[str] = "gaussian"

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def spec(self) -> FamilySpec:
        return FamilySpec("gaussian")


@dataclass(frozen=True)
class Tobit:
    beta: np.ndarray
    sigma2: float
    kind: ClassVar[str] = "tobit"

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def spec(self) -> FamilySpec:
        return FamilySpec("tobit")


@dataclass(frozen=True)
class TwoPart:
    beta_zero: np.ndarray
    beta_pos: np.ndarray
    sigma2: float
    random_zero: bool = True
    kind: ClassVar[str] = "twopart"

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def spec(self) -> FamilySpec:
        return FamilySpec("twopart", random_zero=self.random_zero)


@dataclass(frozen=True)
class Zip:
    beta_zero: np.ndarray
    beta_count: np.ndarray
    variant: str = "yau-lee"
    kind: ClassVar[str] = "zip"

    @property
    def spec(self) -> FamilySpec:
        return FamilySpec("zip", variant=self.variant)


# ------------------------------------------------------------------ #
# Mixture and shrinkage state
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class MixtureState:
    """Finite normal mixture on the random effects. Allocations are 0-based."""

    pi: np.ndarray
    alloc: np.ndarray
    mu: np.ndarray
    Psi: np.ndarray

    @property
    def K(self) -> int:
        return self.pi.size

    def check(self) -> None:
        if abs(self.pi.sum() - 1.0) > 1e-12 or np.any(self.pi < 0) or np.any(self.pi > 1):
            raise ValueError("mixing weights are not on the simplex")
        if self.alloc.size and (self.alloc.min() < 0 or self.alloc.max() >= self.K):
            raise ValueError("allocation outside 0..K-1")
        for k in range(self.K):
            if not np.allclose(self.Psi[k], self.Psi[k].T, atol=1e-12):
                raise ValueError(f"Psi[{k}] is not symmetric")
            if np.linalg.eigvalsh(self.Psi[k]).min() <= 0:
                raise ValueError(f"Psi[{k}] is not positive definite")


@dataclass(frozen=True)
class ShrinkageState:
    """Adaptive-Lasso triples for one coefficient block."""

    beta: np.ndarray
    tau2: np.ndarray
    lam2: np.ndarray

    def check(self) -> None:
        if np.any(~(self.tau2 > 0)) or np.any(~(self.lam2 > 0)):
            raise ValueError("tau2 and lambda2 must be positive")


@dataclass(frozen=True)
class Priors:
    """Hyperparameters. ``psi_df=None`` means ``q + 2``."""

    mu_var: float = 100.0
    psi_df: float | None = None
    psi_scale: float = 1.0
    dirichlet: float = 1.0
    sigma_shape: float = 0.01
    sigma_rate: float = 0.01
    lasso_a: float = 1.0
    lasso_b: float = 0.1

    def psi_dof(self, q: int) -> float:
        return q + 2.0 if self.psi_df is None else float(self.psi_df)


# ------------------------------------------------------------------ #
# Validation
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class ValidationReport:
    m: int
    R: int
    P: int
    q: int
    n_obs: dict[str, int]
    zero_fraction: dict[str, float]
    identifiable: bool = True
    balanced: bool = True
    notes: tuple[str, ...] = field(default_factory=tuple)


def validate_dataset(ds: LongitudinalDataset, families: Sequence[FamilySpec]) -> ValidationReport:
    """Check structure, identifiability and family support of ``ds``."""
    if ds.m == 0:
        raise DatasetError("dataset has no individuals")
    if ds.R == 0:
        raise DatasetError("dataset has no features")
    if len(families) != ds.R:
        raise DatasetError(f"{len(families)} families given for {ds.R} features")
    overlap = set(ds.covariates) & set(ds.re_covariates)
    if overlap:
        raise IdentifiabilityError(
            f"fixed and random-effect designs share columns {sorted(overlap)}"
        )
    if len(set(ds.feature_names)) != ds.R:
        raise DatasetError("duplicate feature names")

    zero_fraction = {}
    n_obs = {}
    balanced = True
    first_counts = None
    for r, (f, fam) in enumerate(zip(ds.features, families)):
        n = f.y.shape[0]
        if f.X.shape != (n, ds.P) or f.Z.shape != (n, len(ds.re_covariates)):
            raise DatasetError(f"feature {f.name!r}: design shapes do not match {n} responses")
        if f.subject.shape != (n,) or f.time.shape != (n,):
            raise DatasetError(f"feature {f.name!r}: index arrays do not match responses")
        if n and (f.subject.min() < 0 or f.subject.max() >= ds.m):
            raise DatasetError(f"feature {f.name!r}: subject index out of range")
        if np.any(np.diff(f.subject) < 0):
            raise DatasetError(f"feature {f.name!r}: rows are not grouped by individual")
        counts = np.bincount(f.subject, minlength=ds.m)
        if np.any(counts < 1):
            missing = int(np.flatnonzero(counts < 1)[0])
            raise DatasetError(f"feature {f.name!r}: individual {ds.ids[missing]!r} has no observations")
        if first_counts is None:
            first_counts = counts
        balanced = balanced and np.all(counts == counts[0]) and np.array_equal(counts, first_counts)
        if not (np.all(np.isfinite(f.y)) and np.all(np.isfinite(f.X)) and np.all(np.isfinite(f.Z))):
            raise DatasetError(f"feature {f.name!r}: non-finite values")
        if fam.kind in ("tobit", "twopart", "zip") and np.any(f.y < 0):
            raise FamilyMismatchError(f"feature {f.name!r}: negative response for {fam.kind} family")
        if fam.kind == "zip" and np.any(f.y != np.round(f.y)):
            raise FamilyMismatchError(f"feature {f.name!r}: non-integer counts for zip family")
        zero_fraction[f.name] = float(np.mean(f.y == 0))
        n_obs[f.name] = int(n)

    q = sum(fam.re_dim(len(ds.re_covariates)) for fam in families)
    return ValidationReport(
        m=ds.m,
        R=ds.R,
        P=ds.P,
        q=q,
        n_obs=n_obs,
        zero_fraction=zero_fraction,
        identifiable=True,
        balanced=bool(balanced),
    )


# ------------------------------------------------------------------ #
# Linear predictors and likelihoods
# ------------------------------------------------------------------ #


def linear_predictor(x_row, beta, z_row, gamma_slice) -> float:
    x_row, beta = np.asarray(x_row, dtype=float), np.asarray(beta, dtype=float)
    z_row, gamma_slice = np.asarray(z_row, dtype=float), np.asarray(gamma_slice, dtype=float)
    if x_row.shape != beta.shape or z_row.shape != gamma_slice.shape:
        raise ValueError(
            f"dimension mismatch: x {x_row.shape} vs beta {beta.shape}, "
            f"z {z_row.shape} vs gamma {gamma_slice.shape}"
        )
    return float(x_row @ beta + z_row @ gamma_slice)


_LOG_2PI = np.log(2.0 * np.pi)


def _normal_logpdf(x, mean, sigma2):
    return -0.5 * (_LOG_2PI + np.log(sigma2) + (x - mean) ** 2 / sigma2)


def cell_loglik(kind: str, y, etas: dict[str, np.ndarray], sigma2: float | None = None) -> np.ndarray:
    """Per-cell observed-data log-likelihood.

    ``etas`` maps part roles to linear predictors evaluated at the same cells
    as ``y``.
    """
    y = np.asarray(y, dtype=float)
    if kind == "gaussian":
        return _normal_logpdf(y, etas["mean"], sigma2)
    if kind == "tobit":
        eta = etas["mean"]
        sd = np.sqrt(sigma2)
        pos = y > 0
        return np.where(pos, _normal_logpdf(y, eta, sigma2), log_ndtr(-eta / sd))
    if kind == "twopart":
        ez = etas["zero"]
        pos = y > 0
        logy = np.log(np.where(pos, y, 1.0))
        dens = log_expit(-ez) + _normal_logpdf(logy, etas["pos"], sigma2) - logy
        return np.where(pos, dens, log_expit(ez))
    if kind == "zip":
        ez, ec = etas["zero"], etas["count"]
        lam = np.exp(ec)
        zero = np.logaddexp(log_expit(ez), log_expit(-ez) - lam)
        count = log_expit(-ez) + y * ec - lam - gammaln(y + 1.0)
        return np.where(y > 0, count, zero)
    raise ValueError(f"unknown family {kind!r}")


def log_likelihood(family, y, X, z, gamma_slice) -> float:
    """Observed-data log-likelihood of one individual's feature vector.

    ``gamma_slice`` concatenates the random-effect coefficients of the
    family's random parts, in part order (zero part first where present).
    """
    y = np.asarray(y, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    gamma_slice = np.atleast_1d(np.asarray(gamma_slice, dtype=float))
    spec = family.spec
    parts = spec.parts("_")
    s = z.shape[1]
    if gamma_slice.size != s * sum(p.random for p in parts):
        raise ValueError(f"gamma slice of length {gamma_slice.size} does not match family layout")
    if X.shape[0] != y.size or z.shape[0] != y.size:
        raise ValueError("design rows do not match responses")
    betas = {
        "gaussian": lambda f: {"mean": f.beta},
        "tobit": lambda f: {"mean": f.beta},
        "twopart": lambda f: {"zero": f.beta_zero, "pos": f.beta_pos},
        "zip": lambda f: {"zero": f.beta_zero, "count": f.beta_count},
    }[spec.kind](family)
    etas = {}
    offset = 0
    for p in parts:
        eta = X @ np.asarray(betas[p.role], dtype=float)
        if p.random:
            eta = eta + z @ gamma_slice[offset:offset + s]
            offset += s
        etas[p.role] = eta
    for eta in etas.values():
        if not np.all(np.isfinite(eta)):
            raise ValueError("non-finite linear predictor")
    return float(np.sum(cell_loglik(spec.kind, y, etas, getattr(family, "sigma2", None))))
