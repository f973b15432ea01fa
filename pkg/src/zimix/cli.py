"""Command-line interface: ``zimix simulate | fit | select-k | diagnose | summarize``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import gaussian_kde

from .diagnostics import (
    DiagnosticsError,
    DiagnosticsReport,
    PedReport,
    compute_ped,
    diagnose,
    posterior_membership,
    relabel,
)
from .engine import ChainOutput, SamplerError, run_chains
from .io import (
    ConfigError,
    RunConfig,
    atomic_write,
    load_chains,
    parse_config,
    read_csv,
    resolve_config,
    save_chains,
    write_csv,
    write_dataset_csv,
    write_json,
)
from .kernels import KernelError, Model
from .model import DatasetError, validate_dataset
from .simulate import generate_dataset, hrs_shaped_scenario, two_outcome_scenario
from .summary import cluster_selection_table, selection_table, summarize_parameters, trajectory_table

log = logging.getLogger("zimix")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SAMPLER, EXIT_DIAGNOSTICS = 0, 2, 3, 4, 5
SCENARIOS = {"two-outcome": two_outcome_scenario, "hrs-shaped": hrs_shaped_scenario}
RUN_FILE, CHAINS_FILE = "run.json", "chains.npz"
PED_HEADER = ["k", "ped", "dbar", "popt", "estimator", "min_weight_ess", "flags"]


class StrictDiagnosticsError(RuntimeError):
    pass


# ------------------------------------------------------------------ #
# simulate
# ------------------------------------------------------------------ #


def cmd_simulate(args) -> int:
    opts = {}
    if args.config:
        raw = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        allowed = {"scenario", "seed", "m", "timepoints"}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}; allowed {sorted(allowed)}")
        opts.update(raw)
    for key in ("scenario", "seed", "m", "timepoints"):
        if getattr(args, key) is not None:
            opts[key] = getattr(args, key)
    name = opts.pop("scenario", "two-outcome")
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    scenario = SCENARIOS[name](**opts)
    sim = generate_dataset(scenario)
    out = Path(args.output)
    write_dataset_csv(sim.dataset, out / "data.csv")
    write_csv(out / "truth.csv", ["id", "cluster"], ((i, c + 1) for i, c in zip(sim.dataset.ids, sim.labels)))
    fams = {}
    for f, fam in zip(sim.dataset.features, sim.families):
        fams[f.name] = {"family": fam.kind, "variant": fam.variant} if fam.kind == "zip" else fam.kind
    config = {
        "dataset": "data.csv",
        "features": fams,
        "re_covariates": list(sim.dataset.re_covariates),
        "covariates": list(sim.dataset.covariates),
        "k_range": [2, 5],
        "seed": scenario.seed,
        "output": "fit",
    }
    with atomic_write(out / "config.yaml") as fh:
        yaml.safe_dump(config, fh, sort_keys=False)
    print(f"wrote {sim.dataset.m} individuals x {sim.dataset.R} features to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ #
# fit / select-k
# ------------------------------------------------------------------ #


def _load(cfg: RunConfig):
    ds = cfg.load_dataset()
    families = tuple(cfg.families[name] for name in ds.feature_names)
    report = validate_dataset(ds, families)
    log.info("dataset: m=%d R=%d P=%d q=%d", report.m, report.R, report.P, report.q)
    return ds, families


def fit_one(cfg: RunConfig, K: int, ds, families, out: Path):
    """Fit one K and write every per-fit output under ``out``."""
    model = Model.build(ds, families, K, cfg.priors)
    mcmc = cfg.mcmc_for(K)
    t0 = time.perf_counter()
    chains = run_chains(model, mcmc, parallel=cfg.parallel)
    log.info("K=%d: %d chains in %.1fs", K, len(chains), time.perf_counter() - t0)
    if chains.failures:
        log.warning("K=%d: failed chains %s", K, sorted(chains.failures))
    ped = compute_ped(chains, model, cfg.estimator if len(chains) > 1 else "two-pD")
    save_chains(out / CHAINS_FILE, chains)
    write_json(out / RUN_FILE, {**cfg.to_dict(), "k": [K], "fitted_k": K})
    write_ped_table(out / "ped_table.csv", [ped])
    write_summaries(out, chains, model)
    report = write_diagnostics(out, chains)
    return chains, ped, model, report


def write_ped_table(path, reports) -> None:
    write_csv(path, PED_HEADER, (
        [r.k, r.ped, r.dbar, r.popt, r.estimator, r.min_weight_ess, ";".join(r.flags)] for r in reports
    ))


def read_ped_table(path) -> list[PedReport]:
    header, rows = read_csv(path)
    out = []
    for row in rows:
        d = dict(zip(header, row))
        out.append(PedReport(int(d["k"]), float(d["dbar"]), float(d["popt"]), d["estimator"],
                             float(d["min_weight_ess"]), tuple(x for x in d["flags"].split(";") if x)))
    return out


def _strict_check(report: DiagnosticsReport, args) -> None:
    if getattr(args, "strict", False):
        bad = report.exceeds(args.threshold)
        if bad:
            raise StrictDiagnosticsError(f"R-hat above {args.threshold} for {len(bad)} parameters: {bad[:5]}")


def cmd_fit(args) -> int:
    cfg = _config(args)
    K = args.k if args.k is not None else cfg.k_values[0]
    ds, families = _load(cfg)
    _, ped, _, report = fit_one(cfg, K, ds, families, cfg.output)
    print(f"K={K} PED={ped.ped:.3f} max R-hat={report.max_rhat:.4f} -> {cfg.output}")
    _strict_check(report, args)
    return EXIT_OK


def cmd_select_k(args) -> int:
    cfg = _config(args)
    ds, families = _load(cfg)
    reports = []
    for K in cfg.k_values:
        _, ped, _, _ = fit_one(cfg, K, ds, families, cfg.output / f"k{K}")
        reports.append(ped)
        print(f"K={K} PED={ped.ped:.3f} (Dbar={ped.dbar:.3f}, p_opt={ped.popt:.3f})")
    write_ped_table(cfg.output / "ped_table.csv", reports)
    best = min(reports, key=lambda r: (r.ped, r.k))
    write_json(cfg.output / "selected_k.json", {"k": best.k, "ped": best.ped, "estimator": best.estimator})
    print(f"selected K={best.k}")
    return EXIT_OK


def _config(args) -> RunConfig:
    cfg = parse_config(args.config)
    changes = {}
    if getattr(args, "output", None):
        changes["output"] = Path(args.output)
    if getattr(args, "seed", None) is not None:
        changes["mcmc"] = replace(cfg.mcmc, seed=args.seed)
    if getattr(args, "estimator", None):
        changes["estimator"] = args.estimator
    return replace(cfg, **changes) if changes else cfg


# ------------------------------------------------------------------ #
# diagnose / summarize
# ------------------------------------------------------------------ #


def _fit_dir(path) -> tuple[list[ChainOutput], RunConfig]:
    path = Path(path)
    if not (path / CHAINS_FILE).exists() or not (path / RUN_FILE).exists():
        raise ConfigError(f"{path} is not a fit directory (missing {CHAINS_FILE} or {RUN_FILE})")
    raw = json.loads((path / RUN_FILE).read_text(encoding="utf-8"))
    raw.pop("fitted_k", None)
    cfg = resolve_config(raw, env={})
    return load_chains(path / CHAINS_FILE), cfg


def write_diagnostics(out: Path, chains, density_points: int = 0) -> DiagnosticsReport:
    report = diagnose(chains)
    write_json(out / "rhat.json", report.to_dict())
    rel = relabel(chains)
    traces = [c.params() for c in rel]
    names = [*traces[0], "deviance"]
    for c, t in zip(rel, traces):
        t["deviance"] = c.deviance
    header = ["draw", *(f"chain{c.chain_id + 1}" for c in rel)]
    n = min(c.n_draws for c in rel)
    for name in names:
        write_csv(out / "traces" / f"{name}.csv", header,
                  ([j + 1, *(t[name][j] for t in traces)] for j in range(n)))
        if density_points:
            x = np.concatenate([t[name] for t in traces])
            if np.ptp(x) > 0:
                grid = np.linspace(x.min(), x.max(), density_points)
                dens = gaussian_kde(x)(grid)
                write_csv(out / "densities" / f"{name}.csv", ["x", "density"], zip(grid, dens))
    return report


def write_summaries(out: Path, chains, model: Model) -> None:
    summ = summarize_parameters(chains)
    write_csv(out / "summary.csv", ["param", "mean", "median", "lower95", "upper95", "selected"],
              ([s.param, s.mean, s.median, s.lower, s.upper, s.selected if ".beta." in s.param else ""]
               for s in summ))
    write_csv(out / "selection.csv", ["part", "covariate", "selected"], selection_table(summ))
    write_csv(out / "cluster_selection.csv",
              ["cluster", "part", "covariate", "mean", "lower95", "upper95", "selected"],
              cluster_selection_table(chains))
    probs, hard = posterior_membership(chains)
    ids = model.ds.ids
    write_csv(out / "membership.csv", ["id", "cluster", *(f"p{k + 1}" for k in range(probs.shape[1]))],
              ([ids[i], hard[i] + 1, *probs[i]] for i in range(len(ids))))
    write_csv(out / "trajectories.csv", ["cluster", "part", "link", "wave", "mean", "lower95", "upper95"],
              trajectory_table(chains, model))


def cmd_diagnose(args) -> int:
    chains, _ = _fit_dir(args.fit_dir)
    report = write_diagnostics(Path(args.fit_dir), chains, density_points=args.density_points)
    print(f"max R-hat {report.max_rhat:.4f}; {len(report.exceeds(args.threshold))} above {args.threshold}")
    _strict_check(report, args)
    return EXIT_OK


def cmd_summarize(args) -> int:
    chains, cfg = _fit_dir(args.fit_dir)
    ds = cfg.load_dataset()
    families = tuple(cfg.families[n] for n in ds.feature_names)
    model = Model.build(ds, families, chains[0].K, cfg.priors)
    write_summaries(Path(args.fit_dir), chains, model)
    summ = summarize_parameters(chains)
    for part, cov, sel in selection_table(summ):
        print(f"{part:>24s} {cov:<16s} {'selected' if sel else '-'}")
    return EXIT_OK


# ------------------------------------------------------------------ #
# Entry point
# ------------------------------------------------------------------ #


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zimix", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset, truth labels and a run config")
    s.add_argument("--config", help="YAML scenario file with scenario, seed, m, timepoints")
    s.add_argument("--scenario", choices=sorted(SCENARIOS))
    s.add_argument("--seed", type=int)
    s.add_argument("--m", type=int)
    s.add_argument("--timepoints", type=int)
    s.add_argument("-o", "--output", default="sim")
    s.set_defaults(func=cmd_simulate)

    def run_opts(sp):
        sp.add_argument("config", help="YAML run configuration")
        sp.add_argument("-o", "--output", help="output directory (overrides config and environment)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--estimator", choices=("paired-chain", "two-pD"))

    def strict_opts(sp):
        sp.add_argument("--strict", action="store_true", help="exit 5 when any R-hat exceeds --threshold")
        sp.add_argument("--threshold", type=float, default=1.1)

    f = sub.add_parser("fit", help="fit one K and write summaries, traces and diagnostics")
    run_opts(f)
    strict_opts(f)
    f.add_argument("-k", type=int, help="number of clusters (default: first configured K)")
    f.set_defaults(func=cmd_fit)

    k = sub.add_parser("select-k", help="fit every configured K and tabulate PED")
    run_opts(k)
    k.set_defaults(func=cmd_select_k)

    d = sub.add_parser("diagnose", help="R-hat, ESS, traces and densities of a fit directory")
    d.add_argument("fit_dir")
    d.add_argument("--density-points", type=int, default=128)
    strict_opts(d)
    d.set_defaults(func=cmd_diagnose)

    m = sub.add_parser("summarize", help="posterior summaries, selection and membership tables")
    m.add_argument("fit_dir")
    m.set_defaults(func=cmd_summarize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SamplerError, KernelError) as exc:
        print(f"sampler failure: {exc}", file=sys.stderr)
        return EXIT_SAMPLER
    except (StrictDiagnosticsError, DiagnosticsError) as exc:
        print(f"diagnostics failure: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTICS
    except (OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
