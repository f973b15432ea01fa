import json

import numpy as np
import pytest
import yaml

from conftest import make_dataset
from zimix import cli
from zimix.engine import McmcConfig, SamplerError, run_chains
from zimix.io import (
    ENV_OUTPUT,
    ENV_SEED,
    ConfigError,
    atomic_write,
    load_chains,
    parse_config,
    parse_dataset_csv,
    read_csv,
    resolve_config,
    save_chains,
    write_dataset_csv,
)
from zimix.kernels import Model
from zimix.model import DatasetError, FamilySpec
from zimix.simulate import generate_dataset, two_outcome_scenario

TOY_CSV = "id,wave,y,x1,t\n1,1,0.5,1.0,0.1\n1,2,0.0,1.0,0.2\n2,1,2.5,0.0,0.1\n2,2,3.0,0.0,0.2\n"


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestDatasetCsv:
    def test_round_trip_generator_output(self, tmp_path):
        ds = generate_dataset(two_outcome_scenario(seed=1, m=20)).dataset
        path = write_dataset_csv(ds, tmp_path / "d.csv")
        back = parse_dataset_csv(path, ds.feature_names, ds.re_covariates, ds.covariates)
        assert back == ds

    def test_toy_two_by_two(self, tmp_path):
        ds = parse_dataset_csv(write(tmp_path / "d.csv", TOY_CSV), ["y"], ["t"])
        assert ds.m == 2 and ds.ids == (1, 2)
        f = ds.feature("y")
        assert np.array_equal(f.subject, [0, 0, 1, 1])
        assert np.array_equal(f.y, [0.5, 0.0, 2.5, 3.0])
        assert ds.covariates == ("x1",)
        assert np.allclose(f.Z[:, 0], [0.1, 0.2, 0.1, 0.2])

    def test_rows_sorted_by_wave(self, tmp_path):
        text = "id,wave,y,t\n7,2,1.0,0.2\n7,1,2.0,0.1\n"
        f = parse_dataset_csv(write(tmp_path / "d.csv", text), ["y"], ["t"]).feature("y")
        assert np.array_equal(f.time, [1, 2]) and np.array_equal(f.y, [2.0, 1.0])

    def test_duplicate_pair_named(self, tmp_path):
        text = TOY_CSV + "2,2,1.0,0.0,0.2\n"
        with pytest.raises(DatasetError, match=r"\(2, 2\)"):
            parse_dataset_csv(write(tmp_path / "d.csv", text), ["y"], ["t"])

    def test_missing_column_suggests(self, tmp_path):
        with pytest.raises(DatasetError, match="did you mean 'x1'"):
            parse_dataset_csv(write(tmp_path / "d.csv", TOY_CSV), ["y"], ["t"], ["x_1"])

    def test_non_numeric_cell(self, tmp_path):
        text = TOY_CSV.replace("2.5", "abc")
        with pytest.raises(DatasetError, match="non-numeric value 'abc' in row 4"):
            parse_dataset_csv(write(tmp_path / "d.csv", text), ["y"], ["t"])

    def test_missing_cell(self, tmp_path):
        text = TOY_CSV.replace("3.0", "")
        with pytest.raises(DatasetError, match="missing value in row 5, column 'y'"):
            parse_dataset_csv(write(tmp_path / "d.csv", text), ["y"], ["t"])

    def test_bad_header(self, tmp_path):
        with pytest.raises(DatasetError):
            parse_dataset_csv(write(tmp_path / "d.csv", "wave,id,y\n1,1,0\n"), ["y"])


class TestConfig:
    RAW = {"dataset": "d.csv", "features": {"y": "gaussian"}}

    def test_minimal_defaults(self):
        cfg = resolve_config(dict(self.RAW), env={})
        assert cfg.k_values == (2, 3, 4, 5)
        assert cfg.mcmc.chains == 3
        assert (cfg.mcmc.iterations, cfg.mcmc.burn_in, cfg.mcmc.thin) == (6000, 1000, 5)
        assert cfg.mcmc.seed == 0 and cfg.mcmc.init == "kmeans"
        assert cfg.estimator == "paired-chain"

    def test_unknown_key_suggestion(self):
        with pytest.raises(ConfigError, match="did you mean 'chains'"):
            resolve_config({**self.RAW, "chians": 3}, env={})

    def test_unknown_prior_key(self):
        with pytest.raises(ConfigError, match="priors"):
            resolve_config({**self.RAW, "priors": {"lasso_c": 1.0}}, env={})

    def test_feature_families(self):
        raw = {**self.RAW, "features": {
            "a": "tobit", "b": {"family": "two-part", "random_zero": False},
            "c": {"family": "zip", "variant": "hall"},
        }}
        cfg = resolve_config(raw, env={})
        assert cfg.families["a"] == FamilySpec("tobit")
        assert cfg.families["b"].kind == "twopart" and cfg.families["b"].random_zero is False
        assert cfg.families["c"].variant == "hall"

    def test_bad_family(self):
        with pytest.raises(ConfigError):
            resolve_config({**self.RAW, "features": {"y": "gamma"}}, env={})

    def test_env_overrides(self, tmp_path):
        env = {ENV_SEED: "42", ENV_OUTPUT: str(tmp_path / "out")}
        cfg = resolve_config({**self.RAW, "seed": 1, "output": "elsewhere"}, env=env)
        assert cfg.mcmc.seed == 42
        assert cfg.output == tmp_path / "out"

    def test_bad_env_seed(self):
        with pytest.raises(ConfigError):
            resolve_config(dict(self.RAW), env={ENV_SEED: "x"})

    def test_k_forms(self):
        assert resolve_config({**self.RAW, "k": 3}, env={}).k_values == (3,)
        assert resolve_config({**self.RAW, "k_range": [1, 3]}, env={}).k_values == (1, 2, 3)
        with pytest.raises(ConfigError):
            resolve_config({**self.RAW, "k": 2, "k_range": [1, 3]}, env={})

    def test_paired_chain_needs_two_chains(self):
        with pytest.raises(ConfigError):
            resolve_config({**self.RAW, "chains": 1}, env={})
        cfg = resolve_config({**self.RAW, "chains": 1, "estimator": "two-pD"}, env={})
        assert cfg.mcmc.chains == 1

    def test_paths_relative_to_config(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump(self.RAW))
        cfg = parse_config(path, env={})
        assert cfg.dataset == tmp_path / "d.csv"
        assert cfg.output == tmp_path / "output"

    def test_invalid_yaml(self, tmp_path):
        path = write(tmp_path / "run.yaml", "features: [unclosed\n")
        with pytest.raises(ConfigError):
            parse_config(path, env={})

    def test_to_dict_round_trip(self):
        raw = {**self.RAW, "dataset": "/data/d.csv", "k": [2, 4], "chains": 2, "priors": {"lasso_a": 2.0}}
        cfg = resolve_config(raw, env={})
        again = resolve_config(json.loads(json.dumps(cfg.to_dict())), env={})
        assert again == cfg


class TestAtomicWrite:
    def test_failure_leaves_no_file(self, tmp_path):
        target = tmp_path / "out.csv"
        with pytest.raises(RuntimeError):
            with atomic_write(target) as fh:
                fh.write("partial")
                raise RuntimeError("interrupted")
        assert not target.exists()
        assert list(tmp_path.iterdir()) == []

    def test_failure_keeps_previous_contents(self, tmp_path):
        target = write(tmp_path / "out.csv", "old")
        with pytest.raises(RuntimeError):
            with atomic_write(target) as fh:
                fh.write("new")
                raise RuntimeError
        assert target.read_text() == "old"


def test_chains_round_trip(tmp_path, four_family):
    ds, fams = four_family
    model = Model.build(ds, fams, 2)
    chains = run_chains(model, McmcConfig(chains=2, iterations=30, burn_in=10, thin=2, K=2))
    back = load_chains(save_chains(tmp_path / "c.npz", chains))
    assert back == list(chains)


# ------------------------------------------------------------------ #
# End to end through the command line
# ------------------------------------------------------------------ #

QUICK = {"iterations": 60, "burn_in": 20, "thin": 2, "chains": 2}


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert cli.main(["simulate", "--m", "30", "--timepoints", "4", "--seed", "2", "-o", str(out)]) == 0
    cfg = yaml.safe_load((out / "config.yaml").read_text())
    cfg.pop("k_range")
    cfg.update(QUICK, k=[2])
    (out / "config.yaml").write_text(yaml.safe_dump(cfg))
    return out


@pytest.fixture(scope="module")
def fit_dir(sim_dir):
    assert cli.main(["fit", str(sim_dir / "config.yaml")]) == 0
    return sim_dir / "fit"


@pytest.mark.filterwarnings("ignore:importance weights degenerate")
class TestCli:
    def test_simulate_outputs(self, sim_dir):
        cfg = parse_config(sim_dir / "config.yaml", env={})
        ds = cfg.load_dataset()
        assert ds.m == 30 and ds.feature_names == ("y1", "y2")
        header, rows = read_csv(sim_dir / "truth.csv")
        assert header == ["id", "cluster"] and len(rows) == 30
        assert {r[1] for r in rows} <= {"1", "2"}

    def test_fit_outputs_reparse(self, fit_dir):
        chains = load_chains(fit_dir / "chains.npz")
        assert len(chains) == 2 and chains[0].n_draws == 20
        (ped,) = cli.read_ped_table(fit_dir / "ped_table.csv")
        assert ped.k == 2 and np.isfinite(ped.ped)
        header, rows = read_csv(fit_dir / "membership.csv")
        assert header == ["id", "cluster", "p1", "p2"] and len(rows) == 30
        assert all(abs(float(r[2]) + float(r[3]) - 1.0) < 1e-9 for r in rows)
        header, rows = read_csv(fit_dir / "summary.csv")
        assert header[:5] == ["param", "mean", "median", "lower95", "upper95"]
        assert all(float(r[3]) <= float(r[2]) <= float(r[4]) for r in rows)
        rhat = json.loads((fit_dir / "rhat.json").read_text())
        assert rhat
        header, rows = read_csv(fit_dir / "traces" / "deviance.csv")
        assert header == ["draw", "chain1", "chain2"] and len(rows) == 20

    def test_diagnose_and_summarize(self, fit_dir):
        assert cli.main(["diagnose", str(fit_dir), "--density-points", "16"]) == 0
        header, rows = read_csv(fit_dir / "densities" / "deviance.csv")
        assert header == ["x", "density"] and len(rows) == 16
        before = (fit_dir / "membership.csv").read_bytes()
        assert cli.main(["summarize", str(fit_dir)]) == 0
        assert (fit_dir / "membership.csv").read_bytes() == before
        header, _ = read_csv(fit_dir / "selection.csv")
        assert header == ["part", "covariate", "selected"]

    def test_strict_diagnostics_exit(self, fit_dir):
        assert cli.main(["diagnose", str(fit_dir), "--strict", "--threshold", "0.5"]) == 5

    def test_select_k(self, sim_dir, tmp_path):
        cfg = yaml.safe_load((sim_dir / "config.yaml").read_text())
        cfg.update(k=[1, 2], dataset=str(sim_dir / "data.csv"))
        path = tmp_path / "sel.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert cli.main(["select-k", str(path), "-o", str(tmp_path / "sel")]) == 0
        table = cli.read_ped_table(tmp_path / "sel" / "ped_table.csv")
        assert [r.k for r in table] == [1, 2]
        chosen = json.loads((tmp_path / "sel" / "selected_k.json").read_text())
        assert chosen["k"] == min(table, key=lambda r: (r.ped, r.k)).k

    def test_config_error_exit(self, sim_dir, tmp_path, capsys):
        cfg = yaml.safe_load((sim_dir / "config.yaml").read_text())
        cfg["chians"] = 3
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert cli.main(["fit", str(path)]) == 2
        assert "did you mean 'chains'" in capsys.readouterr().err

    def test_missing_config_exit(self, tmp_path):
        assert cli.main(["fit", str(tmp_path / "absent.yaml")]) == 2

    def test_data_error_exit(self, sim_dir, tmp_path, capsys):
        text = (sim_dir / "data.csv").read_text().splitlines()
        text.append(text[1])
        (tmp_path / "data.csv").write_text("\n".join(text) + "\n")
        cfg = yaml.safe_load((sim_dir / "config.yaml").read_text())
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
        assert cli.main(["fit", str(tmp_path / "c.yaml")]) == 3
        assert "duplicate (id, wave)" in capsys.readouterr().err

    def test_sampler_error_exit(self, sim_dir, tmp_path, monkeypatch):
        def failing(*a, **kw):
            raise SamplerError("every chain failed")

        monkeypatch.setattr(cli, "run_chains", failing)
        assert cli.main(["fit", str(sim_dir / "config.yaml"), "-o", str(tmp_path)]) == 4

    def test_same_seed_identical_outputs(self, sim_dir, tmp_path):
        for name in ("a", "b"):
            assert cli.main(["fit", str(sim_dir / "config.yaml"), "-o", str(tmp_path / name)]) == 0
        for rel in ("summary.csv", "membership.csv", "ped_table.csv", "traces/deviance.csv"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            cli.main(["frobnicate"])


def test_make_dataset_csv_round_trip(tmp_path):
    ds = make_dataset([np.linspace(0.0, 1.0, 20)], m=5)
    back = parse_dataset_csv(write_dataset_csv(ds, tmp_path / "d.csv"), ds.feature_names,
                             ds.re_covariates, ds.covariates)
    assert back == ds
