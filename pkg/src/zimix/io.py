"""Dataset and configuration files, and atomic output writers."""

from __future__ import annotations

import contextlib
import csv
import difflib
import json
import math
import os
import tempfile
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .diagnostics import ESTIMATORS
from .engine import ChainOutput, McmcConfig
from .model import DatasetError, FamilySpec, FeatureData, LongitudinalDataset, Priors

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_dataset_csv",
    "write_dataset_csv",
    "parse_config",
    "resolve_config",
    "atomic_write",
    "write_csv",
    "read_csv",
    "write_json",
    "save_chains",
    "load_chains",
    "ENV_SEED",
    "ENV_OUTPUT",
]

ENV_SEED = "ZIMIX_SEED"
ENV_OUTPUT = "ZIMIX_OUTPUT_DIR"
ID_COLUMN, WAVE_COLUMN = "id", "wave"


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ #
# Atomic writes
# ------------------------------------------------------------------ #


@contextlib.contextmanager
def atomic_write(path, mode: str = "w", newline: str | None = ""):
    """Open a temporary sibling of ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        kwargs = {} if "b" in mode else {"newline": newline, "encoding": "utf-8"}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return Path(path)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    return rows[0], rows[1:]


def write_json(path, obj) -> Path:
    with atomic_write(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return Path(path)


# ------------------------------------------------------------------ #
# Dataset CSV
# ------------------------------------------------------------------ #


def _parse_number(text: str, row: int, column: str) -> float:
    if text.strip() == "":
        raise DatasetError(f"missing value in row {row}, column {column!r}")
    try:
        v = float(text)
    except ValueError:
        raise DatasetError(f"non-numeric value {text!r} in row {row}, column {column!r}") from None
    if not math.isfinite(v):
        raise DatasetError(f"non-finite value {text!r} in row {row}, column {column!r}")
    return v


def _parse_id(text: str):
    try:
        f = float(text)
    except ValueError:
        return text
    return int(f) if f.is_integer() else f


def parse_dataset_csv(
    path,
    features: Sequence[str],
    re_covariates: Sequence[str] = (),
    covariates: Sequence[str] | None = None,
) -> LongitudinalDataset:
    """Read a long-format CSV with columns ``id, wave, <features>, <covariates>``.

    Individuals are ordered by first appearance and rows are sorted by wave
    within individual. ``covariates`` defaults to every column that is not
    an id, wave, feature or random-effect covariate. Every feature shares
    the same rows; empty cells are an error.
    """
    header, rows = read_csv(path)
    header = [h.strip() for h in header]
    if header[:2] != [ID_COLUMN, WAVE_COLUMN]:
        raise DatasetError(f"{path}: header must start with '{ID_COLUMN},{WAVE_COLUMN}', got {header[:2]}")
    if len(set(header)) != len(header):
        raise DatasetError(f"{path}: duplicate column names in header")
    features = list(features)
    re_covariates = list(re_covariates)
    if covariates is None:
        used = set(features) | set(re_covariates) | {ID_COLUMN, WAVE_COLUMN}
        covariates = [h for h in header if h not in used]
    covariates = list(covariates)
    for col in features + re_covariates + covariates:
        if col not in header:
            hint = difflib.get_close_matches(col, header, n=1)
            raise DatasetError(f"{path}: column {col!r} not found" + (f"; did you mean {hint[0]!r}?" if hint else ""))
    if not features:
        raise DatasetError("at least one feature column is required")
    col = {h: j for j, h in enumerate(header)}

    order: dict = {}
    seen: set = set()
    records = []
    for lineno, row in enumerate(rows, start=2):
        if not row or all(c.strip() == "" for c in row):
            continue
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
        if row[0].strip() == "":
            raise DatasetError(f"missing value in row {lineno}, column {ID_COLUMN!r}")
        ident = _parse_id(row[0].strip())
        wave = _parse_number(row[1], lineno, WAVE_COLUMN)
        if (ident, wave) in seen:
            shown = int(wave) if wave.is_integer() else wave
            raise DatasetError(f"duplicate (id, wave) pair ({ident}, {shown}) in row {lineno}")
        seen.add((ident, wave))
        order.setdefault(ident, len(order))
        vals = {c: _parse_number(row[col[c]], lineno, c) for c in features + covariates + re_covariates}
        records.append((order[ident], wave, vals))
    if not records:
        raise DatasetError(f"{path}: no data rows")
    records.sort(key=lambda r: (r[0], r[1]))
    subject = np.array([r[0] for r in records], dtype=np.int64)
    waves = np.array([r[1] for r in records])
    time = waves.astype(np.int64) if np.all(waves == np.round(waves)) else waves
    X = np.array([[r[2][c] for c in covariates] for r in records], dtype=float).reshape(len(records), len(covariates))
    Z = np.array([[r[2][c] for c in re_covariates] for r in records], dtype=float).reshape(len(records), len(re_covariates))
    feats = tuple(
        FeatureData(name, np.array([r[2][name] for r in records]), X.copy(), Z.copy(), subject.copy(), time.copy())
        for name in features
    )
    return LongitudinalDataset(
        ids=tuple(order), covariates=tuple(covariates), re_covariates=tuple(re_covariates), features=feats
    )


def write_dataset_csv(ds: LongitudinalDataset, path) -> Path:
    """Write a dataset whose features share rows, in the format read by :func:`parse_dataset_csv`."""
    f0 = ds.features[0]
    for f in ds.features[1:]:
        if not (np.array_equal(f.subject, f0.subject) and np.array_equal(f.time, f0.time)
                and np.array_equal(f.X, f0.X) and np.array_equal(f.Z, f0.Z)):
            raise DatasetError("features must share rows and design matrices to be written as one table")
    header = [ID_COLUMN, WAVE_COLUMN, *ds.feature_names, *ds.covariates, *ds.re_covariates]
    rows = (
        [ds.ids[f0.subject[j]], f0.time[j], *(f.y[j] for f in ds.features), *f0.X[j], *f0.Z[j]]
        for j in range(f0.y.size)
    )
    return write_csv(path, header, rows)


# ------------------------------------------------------------------ #
# Run configuration
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run settings.

    ``k_values`` holds the cluster counts to fit; ``fit`` uses the first.
    """

    dataset: Path
    families: dict[str, FamilySpec]
    re_covariates: tuple[str, ...] = ()
    covariates: tuple[str, ...] | None = None
    k_values: tuple[int, ...] = (2, 3, 4, 5)
    priors: Priors = field(default_factory=Priors)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    output: Path = Path("output")
    estimator: str = "paired-chain"
    parallel: bool = False

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(self.families)

    def mcmc_for(self, K: int) -> McmcConfig:
        return McmcConfig(**{**{f.name: getattr(self.mcmc, f.name) for f in fields(McmcConfig)}, "K": K})

    def load_dataset(self) -> LongitudinalDataset:
        return parse_dataset_csv(self.dataset, self.features, self.re_covariates, self.covariates)

    def to_dict(self) -> dict:
        fams = {}
        for name, fam in self.families.items():
            d = {"family": fam.kind}
            if fam.kind == "zip":
                d["variant"] = fam.variant
            if fam.kind == "twopart":
                d["random_zero"] = fam.random_zero
            fams[name] = d
        return {
            "dataset": str(Path(self.dataset).resolve()),
            "features": fams,
            "re_covariates": list(self.re_covariates),
            "covariates": None if self.covariates is None else list(self.covariates),
            "k": list(self.k_values),
            "priors": {f.name: getattr(self.priors, f.name) for f in fields(Priors)},
            "chains": self.mcmc.chains,
            "iterations": self.mcmc.iterations,
            "burn_in": self.mcmc.burn_in,
            "thin": self.mcmc.thin,
            "seed": self.mcmc.seed,
            "init": self.mcmc.init,
            "output": str(self.output),
            "estimator": self.estimator,
            "parallel": self.parallel,
        }


_TOP_KEYS = (
    "dataset", "features", "re_covariates", "covariates", "k", "k_range", "priors",
    "chains", "iterations", "burn_in", "thin", "seed", "init", "output", "estimator", "parallel",
)
_FEATURE_KEYS = ("family", "variant", "random_zero")
_PRIOR_KEYS = tuple(f.name for f in fields(Priors))


def _check_keys(given: Iterable[str], allowed: Sequence[str], where: str) -> None:
    for key in given:
        if key not in allowed:
            hint = difflib.get_close_matches(str(key), allowed, n=1)
            msg = f"unknown key {key!r} in {where}"
            raise ConfigError(msg + (f"; did you mean {hint[0]!r}?" if hint else ""))


def _int(value, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    return int(value)


def _family(name: str, value) -> FamilySpec:
    if isinstance(value, str):
        value = {"family": value}
    if not isinstance(value, dict) or "family" not in value:
        raise ConfigError(f"feature {name!r} needs a family name or a mapping with 'family'")
    _check_keys(value, _FEATURE_KEYS, f"feature {name!r}")
    try:
        return FamilySpec(str(value["family"]).lower().replace("_", "-").replace("two-part", "twopart"),
                          variant=value.get("variant"), random_zero=value.get("random_zero"))
    except ValueError as exc:
        raise ConfigError(f"feature {name!r}: {exc}") from None


def resolve_config(raw: dict, base: Path | None = None, env: dict | None = None) -> RunConfig:
    """Validate a raw mapping and fill in defaults.

    Defaults: ``k`` in 2..5, 3 chains of 6000 iterations with 1000 burn-in
    and thinning 5, seed 0, k-means initialization and the paired-chain
    estimator. ``ZIMIX_SEED`` and ``ZIMIX_OUTPUT_DIR`` in ``env`` override
    the seed and output directory.
    """
    env = os.environ if env is None else env
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _check_keys(raw, _TOP_KEYS, "config")
    for req in ("dataset", "features"):
        if req not in raw:
            raise ConfigError(f"missing required key {req!r}")
    base = Path(".") if base is None else base
    if not isinstance(raw["features"], dict) or not raw["features"]:
        raise ConfigError("features must be a non-empty mapping of column name to family")
    families = {str(k): _family(str(k), v) for k, v in raw["features"].items()}

    if "k" in raw and "k_range" in raw:
        raise ConfigError("give either 'k' or 'k_range', not both")
    if "k" in raw:
        k = raw["k"]
        k_values = tuple(_int(v, "k") for v in (k if isinstance(k, list) else [k]))
    elif "k_range" in raw:
        kr = raw["k_range"]
        if not (isinstance(kr, list) and len(kr) == 2):
            raise ConfigError("k_range must be [low, high]")
        k_values = tuple(range(_int(kr[0], "k_range"), _int(kr[1], "k_range") + 1))
    else:
        k_values = (2, 3, 4, 5)
    if not k_values or any(k < 1 for k in k_values):
        raise ConfigError("K values must be a non-empty set of integers >= 1")

    priors_raw = raw.get("priors") or {}
    if not isinstance(priors_raw, dict):
        raise ConfigError("priors must be a mapping")
    _check_keys(priors_raw, _PRIOR_KEYS, "priors")
    priors = Priors(**{k: (None if v is None else float(v)) for k, v in priors_raw.items()})

    seed = raw.get("seed", 0)
    if env.get(ENV_SEED):
        try:
            seed = int(env[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer") from None
    try:
        mcmc = McmcConfig(
            chains=_int(raw.get("chains", 3), "chains"),
            iterations=_int(raw.get("iterations", 6000), "iterations"),
            burn_in=_int(raw.get("burn_in", 1000), "burn_in"),
            thin=_int(raw.get("thin", 5), "thin"),
            seed=_int(seed, "seed"),
            K=k_values[0],
            init=str(raw.get("init", "kmeans")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    estimator = str(raw.get("estimator", "paired-chain"))
    if estimator not in ESTIMATORS:
        raise ConfigError(f"estimator must be one of {ESTIMATORS}")
    if estimator == "paired-chain" and mcmc.chains < 2:
        raise ConfigError("the paired-chain estimator needs at least 2 chains")

    def listed(key):
        v = raw.get(key)
        if v is None:
            return None
        if isinstance(v, str):
            v = [v]
        return tuple(str(x) for x in v)

    output = Path(env.get(ENV_OUTPUT) or raw.get("output", "output"))
    dataset = Path(raw["dataset"])
    return RunConfig(
        dataset=dataset if dataset.is_absolute() else base / dataset,
        families=families,
        re_covariates=listed("re_covariates") or (),
        covariates=listed("covariates"),
        k_values=k_values,
        priors=priors,
        mcmc=mcmc,
        output=output if output.is_absolute() or env.get(ENV_OUTPUT) else base / output,
        estimator=estimator,
        parallel=bool(raw.get("parallel", False)),
    )


def parse_config(path, env: dict | None = None) -> RunConfig:
    """Load a YAML run configuration; relative paths resolve against its directory."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return resolve_config(raw, base=path.parent, env=env)


# ------------------------------------------------------------------ #
# Chain draws
# ------------------------------------------------------------------ #

_DICT_FIELDS = ("beta", "tau2", "lam2", "sigma2", "mh_scale")
_ARRAY_FIELDS = ("pi", "mu", "Psi", "gamma", "alloc", "membership", "deviance", "sweep_seconds")


def save_chains(path, chains: Sequence[ChainOutput]) -> Path:
    """Store chain outputs in one compressed ``.npz`` file."""
    arrays = {}
    meta = []
    for i, c in enumerate(chains):
        for name in _ARRAY_FIELDS:
            arrays[f"c{i}/{name}"] = getattr(c, name)
        for name in _DICT_FIELDS:
            for key, v in getattr(c, name).items():
                arrays[f"c{i}/{name}/{key}"] = v
        meta.append({
            "chain_id": c.chain_id, "K": c.K, "acceptance": c.acceptance,
            "covariates": list(c.covariates), "re_names": list(c.re_names),
            "block_seconds": c.block_seconds,
            "dict_keys": {name: list(getattr(c, name)) for name in _DICT_FIELDS},
        })
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with atomic_write(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)
    return Path(path)


def load_chains(path) -> list[ChainOutput]:
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        out = []
        for i, m in enumerate(meta):
            kw = {name: z[f"c{i}/{name}"] for name in _ARRAY_FIELDS}
            for name in _DICT_FIELDS:
                kw[name] = {k: z[f"c{i}/{name}/{k}"] for k in m["dict_keys"][name]}
            out.append(ChainOutput(
                chain_id=m["chain_id"], K=m["K"], acceptance=m["acceptance"],
                covariates=tuple(m["covariates"]), re_names=tuple(m["re_names"]),
                block_seconds=m["block_seconds"], **kw,
            ))
    return out
