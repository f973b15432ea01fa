"""Random-variate primitives used by the Gibbs kernels.

Every sampler takes an explicit :class:`numpy.random.Generator`. Streams are
derived from ``(seed, stream_id)`` through :class:`numpy.random.SeedSequence`
so that each chain (or any other execution context) can own an independent,
reproducible stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

__all__ = [
    "RngStream",
    "make_rng",
    "sample_truncated_normal",
    "sample_inverse_gaussian",
    "sample_dirichlet",
    "sample_inverse_wishart",
    "sample_polya_gamma",
    "sample_mvn",
    "is_spd",
    "polya_gamma_mean",
    "log_norm_cdf",
]

# Tail mass below which the inverse-CDF route loses precision.
_INVCDF_MIN_MASS = 1e-6


@dataclass(frozen=True)
class RngStream:
    """Identifies a reproducible random stream."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return make_rng(self.seed, self.stream)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for the stream ``(seed, *stream)``.

    Distinct stream tuples give statistically independent generators; the
    same tuple always reproduces the same sequence.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


def is_spd(a: np.ndarray) -> bool:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        return False
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return False
    return True


# ------------------------------------------------------------------ #
# Truncated normal
# ------------------------------------------------------------------ #


def _exp_rejection(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal restricted to ``[a, b]`` with ``a > 0`` far in the tail.

    One-sided exponential proposal with the optimal rate; proposals beyond
    ``b`` are rejected as well.
    """
    rate = 0.5 * (a + np.sqrt(a * a + 4.0))
    out = np.empty_like(a)
    todo = np.arange(a.size)
    while todo.size:
        x = a[todo] + rng.standard_exponential(todo.size) / rate[todo]
        u = rng.random(todo.size)
        ok = (np.log(u) <= -0.5 * (x - rate[todo]) ** 2) & (x <= b[todo])
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
    return out


def _uniform_rejection(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # narrow interval straddling the mode; density varies little over [a, b]
    peak = np.clip(0.0, a, b)
    out = np.empty_like(a)
    todo = np.arange(a.size)
    while todo.size:
        x = a[todo] + (b[todo] - a[todo]) * rng.random(todo.size)
        u = rng.random(todo.size)
        ok = np.log(u) <= 0.5 * (peak[todo] ** 2 - x * x)
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
    return out


def _std_truncnorm(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Reflect so the interval's mass sits in the lower tail, where the CDF
    # keeps relative precision.
    flip = a > -b
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    plo = ndtr(lo)
    phi = ndtr(hi)
    mass = phi - plo
    out = np.empty_like(lo)

    inv = mass >= _INVCDF_MIN_MASS
    if inv.any():
        u = rng.random(int(inv.sum()))
        p = plo[inv] + u * mass[inv]
        x = ndtri(p)
        out[inv] = np.clip(x, lo[inv], hi[inv])
    tail = ~inv
    if tail.any():
        # after reflection the interval lies at or below the mode; narrow
        # intervals go to uniform rejection, whose acceptance is then >= e^-1/2
        narrow = (hi - lo) * np.maximum(np.abs(lo), np.abs(hi)) < 1.0
        far = tail & (hi < 0) & ~narrow
        near = tail & ~far
        if far.any():
            out[far] = -_exp_rejection(-hi[far], -lo[far], rng)
        if near.any():
            out[near] = _uniform_rejection(lo[near], hi[near], rng)
    return np.where(flip, -out, out)


def sample_truncated_normal(mu, sigma, lower, upper, rng: np.random.Generator, size=None):
    """Draw from ``N(mu, sigma^2)`` restricted to ``(lower, upper)``.

    All arguments broadcast. Bounds may be infinite. Uses the inverse CDF when
    the interval carries at least 1e-6 probability and rejection sampling
    otherwise.
    """
    mu, sigma, lower, upper = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mu, sigma, lower, upper))
    )
    if size is not None:
        mu, sigma, lower, upper = (np.broadcast_to(v, size) for v in (mu, sigma, lower, upper))
    if np.any(~(sigma > 0)):
        raise ValueError("sigma must be positive")
    if np.any(~(lower < upper)):
        raise ValueError("lower must be strictly below upper")
    scalar = mu.ndim == 0
    a = np.atleast_1d((lower - mu) / sigma).astype(float).ravel()
    b = np.atleast_1d((upper - mu) / sigma).astype(float).ravel()
    z = _std_truncnorm(a, b, rng).reshape(np.shape(mu))
    x = mu + sigma * z
    # guard against round-off at the boundaries
    x = np.clip(x, lower, upper)
    return float(x) if scalar else x


# ------------------------------------------------------------------ #
# Inverse Gaussian, Dirichlet, inverse Wishart, multivariate normal
# ------------------------------------------------------------------ #


def sample_inverse_gaussian(mean, shape, rng: np.random.Generator, size=None):
    """Inverse-Gaussian (Wald) draws with the given mean and shape."""
    mean = np.asarray(mean, dtype=float)
    shape = np.asarray(shape, dtype=float)
    if np.any(~(mean > 0)) or np.any(~(shape > 0)):
        raise ValueError("inverse-Gaussian mean and shape must be positive")
    out = rng.wald(mean, shape, size=size)
    # wald can round to exactly zero for extreme means
    return np.maximum(out, np.finfo(float).tiny)


def sample_dirichlet(alpha, rng: np.random.Generator) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1 or np.any(~(alpha > 0)):
        raise ValueError("Dirichlet concentration must be a positive vector")
    g = rng.standard_gamma(alpha)
    g = np.maximum(g, np.finfo(float).tiny)
    return g / g.sum()


def sample_inverse_wishart(df: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw ``Psi ~ IW(df, scale)`` so that ``E[Psi] = scale / (df - q - 1)``.

    Bartlett decomposition of the Wishart(df, scale^-1) precision, then
    inverted through its triangular factor.
    """
    scale = np.asarray(scale, dtype=float)
    q = scale.shape[0]
    if scale.shape != (q, q):
        raise ValueError("scale must be square")
    if not df > q - 1:
        raise ValueError(f"inverse-Wishart needs df > q - 1 = {q - 1}, got {df}")
    try:
        c = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as exc:
        raise ValueError("inverse-Wishart scale is not positive definite") from exc
    a = np.zeros((q, q))
    a[np.diag_indices(q)] = np.sqrt(rng.chisquare(df - np.arange(q)))
    il = np.tril_indices(q, -1)
    a[il] = rng.standard_normal(len(il[0]))
    # W = L A A^T L^T with L = c^-T; Psi = W^-1 = c A^-T A^-1 c^T
    t = np.linalg.solve(a, c.T).T  # c @ inv(a).T
    psi = t @ t.T
    return 0.5 * (psi + psi.T)


def sample_mvn(mean, cov, rng: np.random.Generator, size=None) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
        raise ValueError(f"mean of length {mean.size} does not match covariance {cov.shape}")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    shape = (mean.size,) if size is None else (*np.atleast_1d(size), mean.size)
    z = rng.standard_normal(shape)
    return mean + z @ chol.T


# ------------------------------------------------------------------ #
# Polya-Gamma
# ------------------------------------------------------------------ #

_PG_TRUNC = 0.64
_PI = math.pi


@numba.njit(cache=True)
def _norm_logcdf(x):
    if x > -5.0:
        return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))
    # asymptotic expansion keeps precision deep in the lower tail
    return -0.5 * x * x - math.log(-x) - 0.5 * math.log(2.0 * _PI) + math.log1p(-1.0 / (x * x))


@numba.njit(cache=True)
def _pg_a(n, x):
    k = (n + 0.5) * _PI
    if x > _PG_TRUNC:
        return k * math.exp(-0.5 * k * k * x)
    if x > 0.0:
        return math.exp(
            -1.5 * (math.log(0.5 * _PI) + math.log(x)) + math.log(k) - 2.0 * (n + 0.5) * (n + 0.5) / x
        )
    return 0.0


@numba.njit(cache=True)
def _pg_exp_mass(z):
    t = _PG_TRUNC
    fz = 0.125 * _PI * _PI + 0.5 * z * z
    b = math.sqrt(1.0 / t) * (t * z - 1.0)
    a = -math.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = math.log(fz) + fz * t
    xb = x0 - z + _norm_logcdf(b)
    xa = x0 + z + _norm_logcdf(a)
    qdivp = 4.0 / _PI * (math.exp(xb) + math.exp(xa))
    return 1.0 / (1.0 + qdivp)


@numba.njit(cache=True)
def _pg_trunc_invgauss(z, rng):
    t = _PG_TRUNC
    x = t + 1.0
    if 1.0 / t > z:
        alpha = 0.0
        while rng.random() > alpha:
            e1 = rng.standard_exponential()
            e2 = rng.standard_exponential()
            while e1 * e1 > 2.0 * e2 / t:
                e1 = rng.standard_exponential()
                e2 = rng.standard_exponential()
            x = 1.0 + e1 * t
            x = t / (x * x)
            alpha = math.exp(-0.5 * z * z * x)
    else:
        mu = 1.0 / z
        while x > t:
            y = rng.standard_normal()
            y *= y
            half_mu = 0.5 * mu
            mu_y = mu * y
            x = mu + half_mu * mu_y - half_mu * math.sqrt(4.0 * mu_y + mu_y * mu_y)
            if rng.random() > mu / (mu + x):
                x = mu * mu / x
    return x


@numba.njit(cache=True)
def _pg1(c, rng):
    # Devroye-type alternating-series sampler for PG(1, c) = J*(1, c/2) / 4
    z = abs(c) * 0.5
    fz = 0.125 * _PI * _PI + 0.5 * z * z
    pexp = _pg_exp_mass(z)
    while True:
        if rng.random() < pexp:
            x = _PG_TRUNC + rng.standard_exponential() / fz
        else:
            x = _pg_trunc_invgauss(z, rng)
        s = _pg_a(0, x)
        y = rng.random() * s
        n = 0
        while True:
            n += 1
            if n % 2 == 1:
                s -= _pg_a(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _pg_a(n, x)
                if y > s:
                    break


@numba.njit(cache=True)
def _pg_array(b, c, rng):
    out = np.empty(c.size)
    for i in range(c.size):
        acc = 0.0
        for _ in range(b[i]):
            acc += _pg1(c[i], rng)
        out[i] = acc
    return out


def sample_polya_gamma(b, c, rng: np.random.Generator, size=None):
    """Polya-Gamma ``PG(b, c)`` draws for positive integer ``b``.

    ``PG(b, c)`` is the sum of ``b`` independent ``PG(1, c)`` variates. The
    mean is ``b / (2c) * tanh(c / 2)`` (``b / 4`` at ``c = 0``).
    """
    b_arr = np.asarray(b, dtype=float)
    c_arr = np.asarray(c, dtype=float)
    if np.any(~(b_arr > 0)):
        raise ValueError("Polya-Gamma shape b must be positive")
    if np.any(b_arr != np.round(b_arr)):
        raise ValueError("only integer Polya-Gamma shapes are supported")
    if np.any(~np.isfinite(c_arr)):
        raise ValueError("Polya-Gamma tilt must be finite")
    b_arr, c_arr = np.broadcast_arrays(b_arr, c_arr)
    if size is not None:
        b_arr = np.broadcast_to(b_arr, size)
        c_arr = np.broadcast_to(c_arr, size)
    out = _pg_array(
        np.ascontiguousarray(b_arr, dtype=np.int64).ravel(),
        np.ascontiguousarray(c_arr, dtype=float).ravel(),
        rng,
    )
    if b_arr.ndim == 0:
        return float(out[0])
    return out.reshape(b_arr.shape)


def polya_gamma_mean(b, c):
    c = np.asarray(c, dtype=float)
    half = 0.5 * c
    small = np.abs(c) < 1e-6
    safe = np.where(small, 1.0, c)
    return np.where(small, np.asarray(b) / 4.0, np.asarray(b) / (2.0 * safe) * np.tanh(half))


def log_norm_cdf(x):
    """Vectorized ``log Phi(x)`` that stays finite deep in the lower tail."""
    return log_ndtr(x)
