import json

import numpy as np
import pytest
from click.testing import CliRunner

from phtail.cli import main

FAST = ["--epochs", "1", "--batch-size", "100", "--hidden", "8,8", "--phases", "3"]


@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    runner = CliRunner()

    def invoke(*args):
        return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)

    return invoke


@pytest.fixture
def weibull_csv(run):
    res = run("gen", "--family", "weibull", "--k", 0.8, "--lam", 1.0, "--n", 300, "--seed", 1,
              "--out", "w.csv")
    assert res.exit_code == 0, res.output
    return "w.csv"


@pytest.fixture
def copula_csv(run):
    res = run("gen", "--family", "copula5d", "--n", 300, "--seed", 2, "--out", "c.csv")
    assert res.exit_code == 0, res.output
    return "c.csv"


# -- gen ---------------------------------------------------------------------

def test_gen_writes_table_and_provenance(run, weibull_csv, tmp_path):
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == "x0" and len(lines) == 301
    prov = json.loads((tmp_path / "w.provenance.json").read_text())
    assert prov["seed"] == 1 and prov["marginal"] == {"family": "weibull", "k": 0.8, "lam": 1.0}


def test_gen_is_deterministic(run, tmp_path):
    run("gen", "--family", "pareto", "--alpha", 2.4, "--xm", 1, "--n", 50, "--out", "a.csv")
    run("gen", "--family", "pareto", "--alpha", 2.4, "--xm", 1, "--n", 50, "--out", "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_gen_copula_has_five_columns(run, copula_csv, tmp_path):
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "x0,x1,x2,x3,x4"


@pytest.mark.parametrize("args, message", [
    (["--family", "pareto", "--alpha", "-1", "--xm", "1"], "parameter must be positive"),
    (["--family", "pareto", "--alpha", "2"], "needs --xm"),
    (["--family", "weibull", "--k", "1", "--lam", "1", "--mu", "0"], "does not take --mu"),
    (["--family", "weibull", "--k", "1", "--lam", "1", "--n", "0"], "--n must be >= 1"),
    (["--family", "gamma"], "Invalid value"),
])
def test_gen_invalid_input_exits_2(run, args, message):
    res = run("gen", *args, "--out", "x.csv")
    assert res.exit_code == 2
    assert message in res.output


def test_refuses_to_overwrite(run, weibull_csv, tmp_path):
    before = (tmp_path / "w.csv").read_bytes()
    res = run("gen", "--family", "weibull", "--k", 2, "--lam", 1, "--out", "w.csv")
    assert res.exit_code == 2 and "refusing to overwrite" in res.output
    assert (tmp_path / "w.csv").read_bytes() == before


# -- train / sample ---------------------------------------------------------------

def test_train_sample_eval_pipeline(run, weibull_csv, tmp_path):
    res = run("train", "--data", weibull_csv, *FAST, "--out", "runA")
    assert res.exit_code == 0, res.output
    names = sorted(p.name for p in (tmp_path / "runA").iterdir())
    assert names == ["config.json", "epoch_1.json", "log.csv", "log.json", "timing.json",
                     "timing_total.json"]
    cfg = json.loads((tmp_path / "runA" / "config.json").read_text())
    assert cfg["latent_dim"] == 2 and cfg["phases"] == 3

    res = run("sample", "--checkpoint", "runA/epoch_1.json", "--n", 500, "--seed", 3,
              "--out", "g.csv")
    assert res.exit_code == 0, res.output
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[0] == "x0" and len(rows) == 501

    res = run("eval", "--gen", "g.csv", "--real", weibull_csv, "--truth", "weibull:0.8,1",
              "--ccdf", "ccdf.csv", "--out", "report.json")
    assert res.exit_code == 0, res.output
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["ks_tail"]) == 1 and report["tau_err"] is None
    assert (tmp_path / "ccdf.csv").read_text().startswith("x,survival\n")


def test_training_and_sampling_are_reproducible(run, weibull_csv, tmp_path):
    for name in ("r1", "r2"):
        assert run("train", "--data", weibull_csv, *FAST, "--out", name).exit_code == 0
        assert run("sample", "--checkpoint", f"{name}/epoch_1.json", "--n", 100,
                   "--out", f"{name}.csv").exit_code == 0
    for f in ("epoch_1.json", "log.json", "log.csv", "config.json"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
    assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()


def test_train_dry_run(run, weibull_csv, tmp_path):
    res = run("train", "--data", weibull_csv, *FAST, "--dry-run", "--out", "dry")
    assert res.exit_code == 0, res.output
    assert (tmp_path / "dry" / "epoch_0.json").exists()
    assert not (tmp_path / "dry" / "log.json").exists()


def test_train_gaussian(run, weibull_csv, tmp_path):
    res = run("train", "--data", weibull_csv, "--decoder", "gaussian", *FAST, "--out", "gauss")
    assert res.exit_code == 0, res.output
    ckpt = json.loads((tmp_path / "gauss" / "epoch_1.json").read_text())
    assert ckpt["decoder_kind"] == "gaussian"


def test_independent_ph_files_and_sampling(run, copula_csv, tmp_path):
    res = run("train", "--data", copula_csv, "--decoder", "independent-ph", *FAST, "--out", "ind")
    assert res.exit_code == 0, res.output
    dims = sorted(p.name for p in (tmp_path / "ind").iterdir() if p.is_dir())
    assert dims == [f"dim_{j}" for j in range(5)]
    for d in dims:
        assert (tmp_path / "ind" / d / "epoch_1.json").exists()
    manifest = json.loads((tmp_path / "ind" / "epoch_1.json").read_text())
    assert manifest["decoder_kind"] == "independent-ph" and len(manifest["members"]) == 5
    res = run("sample", "--checkpoint", "ind/epoch_1.json", "--n", 20, "--out", "ig.csv")
    assert res.exit_code == 0, res.output
    assert (tmp_path / "ig.csv").read_text().splitlines()[0] == "x0,x1,x2,x3,x4"


def test_sample_zero_rows(run, weibull_csv, tmp_path):
    run("train", "--data", weibull_csv, *FAST, "--dry-run", "--out", "dry")
    res = run("sample", "--checkpoint", "dry/epoch_0.json", "--n", 0, "--out", "empty.csv")
    assert res.exit_code == 0, res.output
    assert (tmp_path / "empty.csv").read_text() == "x0\n"


def test_train_reuses_nonempty_dir_exits_2(run, weibull_csv, tmp_path):
    (tmp_path / "busy").mkdir()
    (tmp_path / "busy" / "keep").write_text("x")
    res = run("train", "--data", weibull_csv, *FAST, "--out", "busy")
    assert res.exit_code == 2


@pytest.mark.parametrize("extra, message", [
    (["--phases", "0"], "--phases"),
    (["--hidden", "a,b"], "--hidden"),
    (["--dims", "3"], "--dims 3"),
    (["--beta", "-1"], "parameter must be positive"),
    (["--lr0", "0"], "lr0"),
])
def test_train_invalid_input(run, weibull_csv, extra, message):
    res = run("train", "--data", weibull_csv, "--epochs", "1", *extra, "--out", "bad")
    assert res.exit_code == 2
    assert message in res.output


def test_train_bad_csv_exits_2(run, tmp_path):
    (tmp_path / "neg.csv").write_text("x0\n1.0\n-2.0\n")
    res = run("train", "--data", "neg.csv", "--out", "r")
    assert res.exit_code == 2 and "line 3" in res.output


def test_runtime_failure_exits_1(run, weibull_csv):
    res = run("train", "--data", weibull_csv, *FAST, "--max-terms", "1", "--out", "r")
    assert res.exit_code == 1
    assert "UniformizationError" in res.output


# -- eval ---------------------------------------------------------------------------

def test_eval_multiple_gens_aggregates(run, copula_csv, tmp_path):
    for s in (1, 2):
        run("gen", "--family", "copula5d", "--n", 300, "--seed", 10 + s, "--out", f"g{s}.csv")
    res = run("eval", "--gen", "g1.csv", "--gen", "g2.csv", "--real", copula_csv,
              "--out", "agg.json")
    assert res.exit_code == 0, res.output
    payload = json.loads((tmp_path / "agg.json").read_text())
    assert len(payload["runs"]) == 2
    assert payload["aggregate"]["tau_err"]["runs"] == 2
    assert "+/-" in res.output


def test_eval_needs_reference(run, weibull_csv):
    res = run("eval", "--gen", weibull_csv)
    assert res.exit_code == 2


def test_eval_dimension_mismatch(run, weibull_csv, copula_csv):
    res = run("eval", "--gen", weibull_csv, "--real", copula_csv)
    assert res.exit_code == 2 and "dimension mismatch" in res.output


# -- fit-ph ---------------------------------------------------------------------------

def test_fit_ph(run, weibull_csv, tmp_path):
    res = run("fit-ph", "--data", weibull_csv, "--phases", 2, "--epochs", 3, "--ccdf", "fit.csv",
              "--out", "fit.json")
    assert res.exit_code == 0, res.output
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert len(fit["alpha"]) == 2 and len(fit["lambda"]) == 2 and len(fit["history"]) == 3
    assert np.all(np.diff(fit["lambda"]) >= 0)
    assert (tmp_path / "fit.csv").read_text().startswith("x,empirical,fitted\n")


def test_fit_ph_column_choice(run, copula_csv, tmp_path):
    assert run("fit-ph", "--data", copula_csv, "--phases", 1, "--out", "a.json").exit_code == 2
    res = run("fit-ph", "--data", copula_csv, "--column", "x2", "--phases", 1, "--epochs", 1,
              "--out", "b.json")
    assert res.exit_code == 0, res.output


# -- ablate ----------------------------------------------------------------------------

def test_ablate_is_reproducible(run, weibull_csv, tmp_path):
    args = ["ablate", "--data", weibull_csv, "--truth", "weibull:0.8,1", "--grid", "2:1",
            "--grid", "3:0.5", "--n-gen", 200, "--epochs", 1, "--batch-size", 150,
            "--hidden", "8"]
    assert run(*args, "--out", "ab1").exit_code == 0
    assert run(*args, "--out", "ab2").exit_code == 0
    table = (tmp_path / "ab1" / "ablation.csv").read_text().splitlines()
    assert table[0].startswith("variant,m,beta,ks_tail_mean,ks_tail_sd")
    assert table[1].startswith("m=2 beta=1,2,1,")
    assert len(table) == 3
    assert ((tmp_path / "ab1" / "ablation.csv").read_bytes()
            == (tmp_path / "ab2" / "ablation.csv").read_bytes())
    assert sorted(p.name for p in (tmp_path / "ab1").iterdir() if p.is_dir()) == \
        ["cell_0_seed_0", "cell_1_seed_0"]


def test_ablate_grid_validation(run, weibull_csv):
    assert run("ablate", "--data", weibull_csv, "--grid", "x", "--out", "a").exit_code == 2
    assert run("ablate", "--data", weibull_csv, "--grid", "2:1", "--full-grid",
               "--out", "b").exit_code == 2


# -- config files -----------------------------------------------------------------------

def test_config_supplies_defaults(run, tmp_path):
    (tmp_path / "gen.cfg").write_text("# weibull\nfamily = weibull\nk = 0.8\nlam = 1\nn = 25\n")
    res = run("gen", "--config", "gen.cfg", "--out", "cfg.csv")
    assert res.exit_code == 0, res.output
    assert len((tmp_path / "cfg.csv").read_text().splitlines()) == 26


def test_command_line_overrides_config(run, tmp_path):
    (tmp_path / "gen.cfg").write_text("family = weibull\nk = 0.8\nlam = 1\nn = 25\n")
    res = run("gen", "--config", "gen.cfg", "--n", 10, "--out", "cfg.csv")
    assert res.exit_code == 0, res.output
    assert len((tmp_path / "cfg.csv").read_text().splitlines()) == 11


def test_config_unknown_key_exits_2(run, tmp_path):
    (tmp_path / "bad.cfg").write_text("family = weibull\nshape = 2\n")
    res = run("gen", "--config", "bad.cfg", "--out", "x.csv")
    assert res.exit_code == 2 and "unknown key 'shape'" in res.output


def test_config_multiple_option(run, weibull_csv, tmp_path):
    run("gen", "--family", "weibull", "--k", 0.8, "--lam", 1, "--n", 300, "--seed", 9,
        "--out", "g.csv")
    (tmp_path / "eval.cfg").write_text("real = w.csv\ncoex-q = 0.9 0.99\n")
    res = run("eval", "--config", "eval.cfg", "--gen", "g.csv")
    assert res.exit_code == 0, res.output
