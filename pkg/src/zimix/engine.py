"""Chain orchestration: initialization, burn-in, thinning and storage."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from .distributions import make_rng
from .kernels import (
    KernelError,
    Model,
    SweepState,
    augment_logistic_pg,
    augment_tobit,
    augment_zip_indicators,
    loglik_cells,
    sweep,
)
from .model import MixtureState, ShrinkageState

__all__ = [
    "McmcConfig",
    "ChainOutput",
    "ChainResults",
    "SamplerError",
    "initialize",
    "run_chain",
    "run_chains",
    "save_checkpoint",
    "load_checkpoint",
    "deviance",
]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ZIMIXCKP"
CHECKPOINT_VERSION = 1
INIT_STRATEGIES = ("kmeans", "random")


class SamplerError(RuntimeError):
    """A chain aborted; ``checkpoint`` is the last good state, if saved."""

    def __init__(self, message: str, checkpoint: Path | None = None, block: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.block = block


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 3
    iterations: int = 6000
    burn_in: int = 1000
    thin: int = 5
    seed: int = 0
    K: int = 2
    init: str = "kmeans"

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must be non-negative and below iterations")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.init not in INIT_STRATEGIES:
            raise ValueError(f"init must be one of {INIT_STRATEGIES}")

    @property
    def n_draws(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


def _arrays_equal(a, b) -> bool:
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_arrays_equal(a[k], b[k]) for k in a)
    return np.array_equal(np.asarray(a), np.asarray(b))


@dataclass(eq=False)
class ChainOutput:
    """Thinned post-burn-in draws of one chain.

    Component-indexed arrays are stored as sampled (not relabeled).
    ``sweep_seconds`` and ``block_seconds`` are wall-clock measurements and
    do not take part in equality.
    """

    chain_id: int
    K: int
    beta: dict[str, np.ndarray]
    tau2: dict[str, np.ndarray]
    lam2: dict[str, np.ndarray]
    sigma2: dict[str, np.ndarray]
    pi: np.ndarray
    mu: np.ndarray
    Psi: np.ndarray
    gamma: np.ndarray
    alloc: np.ndarray
    membership: np.ndarray
    deviance: np.ndarray
    acceptance: dict[str, float]
    mh_scale: dict[str, np.ndarray]
    covariates: tuple[str, ...]
    re_names: tuple[str, ...]
    sweep_seconds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    block_seconds: dict[str, float] = field(default_factory=dict)

    _COMPARED = (
        "chain_id", "K", "beta", "tau2", "lam2", "sigma2", "pi", "mu", "Psi", "gamma",
        "alloc", "membership", "deviance", "acceptance", "mh_scale",
    )

    def __eq__(self, other):
        if not isinstance(other, ChainOutput):
            return NotImplemented
        return all(_arrays_equal(getattr(self, k), getattr(other, k)) for k in self._COMPARED)

    @property
    def n_draws(self) -> int:
        return self.deviance.size

    def params(self) -> dict[str, np.ndarray]:
        """Scalar traces keyed by canonical parameter name.

        Names: ``<part>.beta.<covariate>``, ``<part>.tau2.<covariate>``,
        ``<part>.lam2.<covariate>``, ``<feature>.sigma2``,
        ``<feature>.precision``, ``pi.<k>``, ``mu.<k>.<coord>`` and
        ``Psi.<k>.<coord>.<coord>`` (upper triangle), with 1-based ``k``.
        """
        out = {}
        for key, b in self.beta.items():
            for j, c in enumerate(self.covariates):
                out[f"{key}.beta.{c}"] = b[:, j]
                out[f"{key}.tau2.{c}"] = self.tau2[key][:, j]
                out[f"{key}.lam2.{c}"] = self.lam2[key][:, j]
        for name, s2 in self.sigma2.items():
            out[f"{name}.sigma2"] = s2
            out[f"{name}.precision"] = 1.0 / s2
        for k in range(self.K):
            out[f"pi.{k + 1}"] = self.pi[:, k]
            for a, ca in enumerate(self.re_names):
                out[f"mu.{k + 1}.{ca}"] = self.mu[:, k, a]
                for b in range(a, len(self.re_names)):
                    out[f"Psi.{k + 1}.{ca}.{self.re_names[b]}"] = self.Psi[:, k, a, b]
        return out


class ChainResults(list):
    """Chain outputs ordered by chain id; ``failures`` maps failed ids to errors."""

    def __init__(self, outputs=(), failures=None):
        super().__init__(outputs)
        self.failures: dict[int, str] = dict(failures or {})


def re_coordinate_names(model: Model) -> tuple[str, ...]:
    names = [""] * model.q
    for key, sl in model.layout.slices.items():
        for j, c in enumerate(model.ds.re_covariates):
            names[sl.start + j] = f"{key}.{c}"
    return tuple(names)


# ------------------------------------------------------------------ #
# Initialization
# ------------------------------------------------------------------ #


def _summary_features(model: Model) -> np.ndarray:
    """Per-individual response level and trend against the first random-effect covariate."""
    cols = []
    for f in model.ds.features:
        y = np.log1p(np.maximum(f.y, 0.0)) if np.all(f.y >= 0) else f.y
        n = np.bincount(f.subject, minlength=model.m).astype(float)
        ybar = np.bincount(f.subject, weights=y, minlength=model.m) / n
        if f.Z.shape[1]:
            z = f.Z[:, 0]
            zbar = np.bincount(f.subject, weights=z, minlength=model.m) / n
            dz = z - zbar[f.subject]
            sxx = np.bincount(f.subject, weights=dz * dz, minlength=model.m)
            sxy = np.bincount(f.subject, weights=dz * (y - ybar[f.subject]), minlength=model.m)
            slope = np.where(sxx > 0, sxy / np.where(sxx > 0, sxx, 1.0), 0.0)
            cols.append(slope)
        cols.append(ybar)
    data = np.column_stack(cols)
    sd = data.std(axis=0)
    return (data - data.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def initial_allocations(model: Model, strategy: str, rng: np.random.Generator) -> np.ndarray:
    K = model.K
    if strategy == "random":
        return rng.integers(0, K, size=model.m)
    if K == 1:
        return np.zeros(model.m, dtype=np.int64)
    _, labels = kmeans2(_summary_features(model), K, minit="++", seed=rng)
    return labels.astype(np.int64)


def initialize(model: Model, config: McmcConfig, rng: np.random.Generator) -> SweepState:
    """Starting state: small random coefficients, zero random effects, prior-mean scales."""
    if config.K > model.m:
        raise ValueError(f"K={config.K} exceeds the number of individuals m={model.m}")
    if config.K != model.K:
        model = model.with_K(config.K)
    pr = model.priors
    q, K, P = model.q, model.K, model.P
    lam2 = pr.lasso_a / pr.lasso_b
    shrinkage = {
        pd.key: ShrinkageState(
            beta=0.1 * rng.standard_normal(P),
            tau2=np.full(P, 2.0 / lam2),
            lam2=np.full(P, lam2),
        )
        for pd in model.parts
    }
    s2 = pr.sigma_rate / (pr.sigma_shape - 1.0) if pr.sigma_shape > 1.0 else 1.0
    df = pr.psi_dof(q)
    psi0 = pr.psi_scale * np.eye(q) / (df - q - 1.0 if df > q + 1.0 else 1.0)
    mixture = MixtureState(
        pi=np.full(K, 1.0 / K),
        alloc=initial_allocations(model, config.init, rng),
        mu=np.zeros((K, q)),
        Psi=np.repeat(psi0[None], K, axis=0),
    )
    state = SweepState(
        mixture=mixture,
        gamma=np.zeros((model.m, q)),
        shrinkage=shrinkage,
        sigma2={name: s2 for name in model.sigma_features},
    )
    for pd in model.parts:
        if pd.part.link == "log":
            state.mh_scale[f"{pd.key}.beta"] = 1.0
            if pd.re is not None:
                state.mh_scale[f"{pd.key}.re"] = 0.5
    state.zip_w = augment_zip_indicators(state, model, rng)
    state.ystar = augment_tobit(state, model, rng)
    state.omega = {
        pd.key: augment_logistic_pg(pd, state, model, rng) for pd in model.parts if pd.part.link == "logit"
    }
    return state


# ------------------------------------------------------------------ #
# Checkpoints
# ------------------------------------------------------------------ #


def _state_arrays(state: SweepState) -> dict[str, np.ndarray]:
    mix = state.mixture
    arr = {"mixture/pi": mix.pi, "mixture/alloc": mix.alloc, "mixture/mu": mix.mu, "mixture/Psi": mix.Psi,
           "gamma": state.gamma}
    for key, sh in state.shrinkage.items():
        arr[f"shrinkage/{key}/beta"] = sh.beta
        arr[f"shrinkage/{key}/tau2"] = sh.tau2
        arr[f"shrinkage/{key}/lam2"] = sh.lam2
    for group in ("sigma2", "ystar", "omega", "zip_w", "mh_scale", "mh_accept"):
        for key, v in getattr(state, group).items():
            arr[f"{group}/{key}"] = np.asarray(v)
    if state.membership is not None:
        arr["membership"] = state.membership
    return arr


def save_checkpoint(path, state: SweepState, rng: np.random.Generator, iteration: int) -> Path:
    """Write a versioned snapshot of ``state`` and the RNG position atomically."""
    path = Path(path)
    buf = io.BytesIO()
    arrays = _state_arrays(state)
    meta = {"iteration": int(iteration), "rng": rng.bit_generator.state, "keys": sorted(arrays)}
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    payload = CHECKPOINT_MAGIC + CHECKPOINT_VERSION.to_bytes(4, "little") + buf.getvalue()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[SweepState, np.random.Generator, int]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version = int.from_bytes(raw[len(CHECKPOINT_MAGIC): len(CHECKPOINT_MAGIC) + 4], "little")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    with np.load(io.BytesIO(raw[len(CHECKPOINT_MAGIC) + 4:])) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        arr = {k: z[k] for k in meta["keys"]}
    groups: dict[str, dict] = {g: {} for g in ("sigma2", "ystar", "omega", "zip_w", "mh_scale", "mh_accept")}
    shrink: dict[str, dict] = {}
    for k, v in arr.items():
        head, _, rest = k.partition("/")
        if head == "shrinkage":
            part, _, what = rest.rpartition("/")
            shrink.setdefault(part, {})[what] = v
        elif head in ("sigma2", "mh_scale", "mh_accept"):
            groups[head][rest] = float(v)
        elif head in groups:
            groups[head][rest] = v
    state = SweepState(
        mixture=MixtureState(arr["mixture/pi"], arr["mixture/alloc"], arr["mixture/mu"], arr["mixture/Psi"]),
        gamma=arr["gamma"],
        shrinkage={k: ShrinkageState(v["beta"], v["tau2"], v["lam2"]) for k, v in shrink.items()},
        membership=arr.get("membership"),
        **groups,
    )
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng"]
    return state, rng, int(meta["iteration"])


# ------------------------------------------------------------------ #
# Running chains
# ------------------------------------------------------------------ #


def deviance(state: SweepState, model: Model) -> float:
    """``-2`` times the observed-data log-likelihood, conditional on the random effects."""
    total = sum(float(v.sum()) for v in loglik_cells(state, model).values())
    if not np.isfinite(total):
        raise ValueError("non-finite log-likelihood")
    return -2.0 * total


def run_chain(
    model: Model,
    config: McmcConfig,
    chain_id: int = 0,
    *,
    checkpoint_dir: str | os.PathLike | None = None,
    trace_path: str | os.PathLike | None = None,
    flush_every: int = 100,
) -> ChainOutput:
    """Run one chain on stream ``(config.seed, chain_id)``.

    Proposal scales adapt only during burn-in. With ``trace_path`` the scalar
    draws are appended to a CSV every ``flush_every`` sweeps. On a kernel
    failure the last good state is written under ``checkpoint_dir`` (when
    given) and :class:`SamplerError` is raised.
    """
    model = model.with_K(config.K) if model.K != config.K else model
    rng = make_rng(config.seed, chain_id)
    state = initialize(model, config, rng)
    n = config.n_draws
    P, q, K, m = model.P, model.q, model.K, model.m
    keys = [pd.key for pd in model.parts]
    rec = {
        "beta": {k: np.empty((n, P)) for k in keys},
        "tau2": {k: np.empty((n, P)) for k in keys},
        "lam2": {k: np.empty((n, P)) for k in keys},
        "sigma2": {k: np.empty(n) for k in model.sigma_features},
        "pi": np.empty((n, K)),
        "mu": np.empty((n, K, q)),
        "Psi": np.empty((n, K, q, q)),
        "gamma": np.empty((n, m, q)),
        "alloc": np.empty((n, m), dtype=np.int64),
        "membership": np.empty((n, m, K)),
        "deviance": np.empty(n),
        "mh_scale": {k: np.empty(n) for k in state.mh_scale},
    }
    acc_sum: dict[str, float] = {}
    acc_n = 0
    sweep_seconds = np.empty(config.iterations)
    block_seconds: dict[str, float] = {}
    stored = 0
    flushed = 0
    re_names = re_coordinate_names(model)

    for it in range(config.iterations):
        t0 = time.perf_counter()
        try:
            new_state, timing = sweep(state, model, rng, adapt=it < config.burn_in, iteration=it)
        except KernelError as exc:
            ckpt = None
            if checkpoint_dir is not None:
                ckpt = save_checkpoint(Path(checkpoint_dir) / f"chain{chain_id}_failed.ckpt", state, rng, it)
            raise SamplerError(f"chain {chain_id} failed at sweep {it}: {exc}", ckpt, exc.block) from exc
        state = new_state
        sweep_seconds[it] = time.perf_counter() - t0
        for b, s in timing.items():
            block_seconds[b] = block_seconds.get(b, 0.0) + s
        if it >= config.burn_in:
            for k, a in state.mh_accept.items():
                acc_sum[k] = acc_sum.get(k, 0.0) + a
            acc_n += 1
            if (it - config.burn_in + 1) % config.thin == 0 and stored < n:
                s = stored
                for k in keys:
                    sh = state.shrinkage[k]
                    rec["beta"][k][s] = sh.beta
                    rec["tau2"][k][s] = sh.tau2
                    rec["lam2"][k][s] = sh.lam2
                for k in model.sigma_features:
                    rec["sigma2"][k][s] = state.sigma2[k]
                mix = state.mixture
                rec["pi"][s] = mix.pi
                rec["mu"][s] = mix.mu
                rec["Psi"][s] = mix.Psi
                rec["gamma"][s] = state.gamma
                rec["alloc"][s] = mix.alloc
                rec["membership"][s] = state.membership
                rec["deviance"][s] = deviance(state, model)
                for k in rec["mh_scale"]:
                    rec["mh_scale"][k][s] = state.mh_scale[k]
                stored += 1
        if trace_path is not None and ((it + 1) % flush_every == 0 or it + 1 == config.iterations):
            flushed = _append_traces(trace_path, rec, model, re_names, flushed, stored)

    return ChainOutput(
        chain_id=chain_id,
        K=K,
        beta=rec["beta"],
        tau2=rec["tau2"],
        lam2=rec["lam2"],
        sigma2=rec["sigma2"],
        pi=rec["pi"],
        mu=rec["mu"],
        Psi=rec["Psi"],
        gamma=rec["gamma"],
        alloc=rec["alloc"],
        membership=rec["membership"],
        deviance=rec["deviance"],
        acceptance={k: v / max(acc_n, 1) for k, v in acc_sum.items()},
        mh_scale=rec["mh_scale"],
        covariates=model.ds.covariates,
        re_names=re_names,
        sweep_seconds=sweep_seconds,
        block_seconds=block_seconds,
    )


def _append_traces(path, rec, model, re_names, start, stop) -> int:
    if stop <= start:
        return start
    partial = ChainOutput(
        chain_id=0, K=model.K,
        beta={k: v[start:stop] for k, v in rec["beta"].items()},
        tau2={k: v[start:stop] for k, v in rec["tau2"].items()},
        lam2={k: v[start:stop] for k, v in rec["lam2"].items()},
        sigma2={k: v[start:stop] for k, v in rec["sigma2"].items()},
        pi=rec["pi"][start:stop], mu=rec["mu"][start:stop], Psi=rec["Psi"][start:stop],
        gamma=rec["gamma"][start:stop], alloc=rec["alloc"][start:stop],
        membership=rec["membership"][start:stop], deviance=rec["deviance"][start:stop],
        acceptance={}, mh_scale={}, covariates=model.ds.covariates, re_names=re_names,
    )
    params = partial.params()
    params["deviance"] = partial.deviance
    path = Path(path)
    new_file = not path.exists() or start == 0
    with open(path, "w" if start == 0 else "a", newline="") as fh:
        w = csv.writer(fh)
        if new_file:
            w.writerow(["draw", *params])
        for i in range(stop - start):
            w.writerow([start + i + 1, *(repr(float(v[i])) for v in params.values())])
    return stop


def _run_one(args):
    model, config, chain_id = args
    try:
        return chain_id, run_chain(model, config, chain_id), None
    except Exception as exc:  # noqa: BLE001 - reported per chain
        return chain_id, None, f"{type(exc).__name__}: {exc}"


def run_chains(model: Model, config: McmcConfig, *, parallel: bool | None = None, max_workers: int | None = None) -> ChainResults:
    """Run ``config.chains`` independent chains, concurrently when allowed.

    Chain ``c`` always uses stream ``(config.seed, c)``, so serial and
    concurrent execution give identical outputs. Failed chains are logged
    and listed in ``ChainResults.failures``; if every chain fails the first
    error is raised.
    """
    jobs = [(model, config, c) for c in range(config.chains)]
    if parallel is None:
        parallel = config.chains > 1 and (os.cpu_count() or 1) > 1
    if parallel:
        workers = max_workers or min(config.chains, os.cpu_count() or 1)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    outputs = [out for _, out, _ in sorted(results, key=lambda r: r[0]) if out is not None]
    failures = {cid: err for cid, _, err in results if err is not None}
    for cid, err in failures.items():
        log.error("chain %d failed: %s", cid, err)
    if not outputs:
        raise SamplerError(f"all chains failed: {failures}")
    return ChainResults(outputs, failures)


def with_config(config: McmcConfig, **changes) -> McmcConfig:
    return replace(config, **changes)
