"""``phtail`` command line: gen, train, sample, eval, fit-ph, ablate.

Every command is a function of its options and seed.  Outputs are never
overwritten: an existing output file or a non-empty run directory is an
input error.  Wall-clock timings go to separate ``timing`` files so that the
remaining outputs are byte-identical across re-runs.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import click
import numpy as np

from .config import ConfigError, read_config
from .data import (FAMILIES, CsvError, Dataset, MarginalSpec, benchmark_copula, dataset_csv,
                   gen_marginal, gen_t_copula, load_csv, read_numeric_csv)
from .jsonio import dump_json, fmt_float, write_new, write_table_csv
from .metrics import MetricsReport, aggregate, empirical_ccdf, evaluate
from .model import GaussianVaeModel, PhVaeModel, generate, model_to_json
from .ph import UniformizationConfig, UniformizationError, ph_to_json
from .ph import ccdf as ph_ccdf
from .trainer import (TrainConfig, TrainingError, combine_logs, fit_ph, generate_independent,
                      init_rng, load_checkpoint, ph_mean_nll, train, train_independent)

DEFAULT_GRID = (
    ("Default (PH-VAE)", 10, 1.0),
    ("PH-VAE (small)", 5, 1.0),
    ("PH-VAE (medium)", 15, 1.0),
    ("PH-VAE (beta=0.5)", 10, 0.5),
    ("PH-VAE (beta=2.0)", 10, 2.0),
)


# -- shared plumbing ---------------------------------------------------------

def _load_config(ctx: click.Context, param: click.Parameter, value):
    if value is None:
        return None
    try:
        raw = read_config(value)
    except (OSError, ConfigError) as exc:
        raise click.BadParameter(str(exc), ctx=ctx, param=param) from None
    params = {p.name: p for p in ctx.command.params}
    defaults = {}
    for key, text in raw.items():
        target = params.get(key)
        if target is None or key == "config":
            raise click.BadParameter(f"unknown key {key!r} for '{ctx.command.name}'",
                                     ctx=ctx, param=param)
        defaults[key] = text.split() if getattr(target, "multiple", False) else text
    ctx.default_map = {**(ctx.default_map or {}), **defaults}
    return value


def config_option(fn):
    return click.option("--config", type=click.Path(dir_okay=False), is_eager=True,
                        expose_value=False, callback=_load_config,
                        help="Flat 'key = value' file supplying option defaults.")(fn)


def seed_option(fn):
    return click.option("--seed", type=int, default=0, show_default=True,
                        help="Seed for every random stream of the command.")(fn)


def _bad(message: str) -> click.UsageError:
    return click.UsageError(message)


def _fresh_file(path: str | Path) -> Path:
    path = Path(path)
    if path.exists():
        raise _bad(f"refusing to overwrite existing output {path}")
    return path


def _fresh_dir(path: str | Path) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise _bad(f"refusing to reuse non-empty run directory {path}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_dataset(path: str) -> Dataset:
    try:
        return load_csv(path)
    except (OSError, CsvError, ValueError) as exc:
        raise _bad(str(exc)) from None


def _read_table(path: str) -> np.ndarray:
    try:
        return read_numeric_csv(path, allow_negative=True)[1]
    except (OSError, CsvError) as exc:
        raise _bad(str(exc)) from None


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise _bad(f"--hidden must be comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise _bad("--hidden needs at least one positive layer width")
    return sizes


def _parse_truth(specs) -> list[MarginalSpec] | None:
    if not specs:
        return None
    try:
        return [MarginalSpec.parse(s) for s in specs]
    except ValueError as exc:
        raise _bad(str(exc)) from None


def _positive(name: str, value, allow_zero: bool = False):
    if value is None:
        return
    if not (value >= 0 if allow_zero else value > 0):
        raise _bad(f"parameter must be positive: --{name.replace('_', '-')}={value}")


def _train_config(seed, lr0, weight_decay, clip_norm, epochs, batch_size, tolerance,
                  max_terms) -> TrainConfig:
    try:
        return TrainConfig(lr0=lr0, weight_decay=weight_decay, clip_norm=clip_norm, epochs=epochs,
                           batch_size=batch_size, seed=seed,
                           uniformization=UniformizationConfig(tolerance, max_terms))
    except ValueError as exc:
        raise _bad(str(exc)) from None


def train_options(fn):
    opts = [
        click.option("--lr0", type=float, default=1e-3, show_default=True),
        click.option("--weight-decay", type=float, default=1e-5, show_default=True),
        click.option("--clip-norm", type=float, default=5.0, show_default=True),
        click.option("--epochs", type=int, default=13, show_default=True),
        click.option("--batch-size", type=int, default=256, show_default=True),
        click.option("--tolerance", type=float, default=1e-8, show_default=True,
                     help="Poisson tail mass left out of the uniformization series."),
        click.option("--max-terms", type=int, default=10_000, show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


class _Runtime:
    """Turn library failures into exit code 1 with a one-line message."""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is None or isinstance(exc, (click.ClickException, click.exceptions.Exit,
                                           click.exceptions.Abort)):
            return False
        if isinstance(exc, (TrainingError, UniformizationError, FloatingPointError,
                            MemoryError, RuntimeError, ValueError, OSError)):
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc
        return False


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def main():
    """Phase-type VAE toolkit for heavy-tailed data."""


# -- gen ---------------------------------------------------------------------

@main.command()
@config_option
@click.option("--family", type=click.Choice(sorted(FAMILIES) + ["copula5d"]), required=True,
              help="Marginal family, or the declared 5D t-copula benchmark.")
@click.option("--k", "k", type=float, help="Weibull or Burr shape k.")
@click.option("--lam", type=float, help="Weibull scale.")
@click.option("--alpha", type=float, help="Pareto tail index.")
@click.option("--xm", type=float, help="Pareto scale (minimum).")
@click.option("--mu", type=float, help="Lognormal location.")
@click.option("--sigma", type=float, help="Lognormal scale.")
@click.option("--c", "c", type=float, help="Burr shape c.")
@click.option("--nu", type=float, default=4.0, show_default=True, help="Copula degrees of freedom.")
@click.option("--n", type=int, default=10_000, show_default=True)
@seed_option
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def gen(family, k, lam, alpha, xm, mu, sigma, c, nu, n, seed, out):
    """Generate a synthetic dataset plus a provenance sidecar."""
    given = {"k": k, "lam": lam, "alpha": alpha, "xm": xm, "mu": mu, "sigma": sigma, "c": c}
    if n < 1:
        raise _bad("--n must be >= 1")
    try:
        if family == "copula5d":
            base = benchmark_copula()
            spec = type(base)(base.corr, nu, base.marginals, base.independent_pairs)
            dataset = gen_t_copula(spec, n, seed)
        else:
            names = FAMILIES[family]
            missing = [p for p in names if given[p] is None]
            if missing:
                raise _bad(f"{family} needs --{' --'.join(missing)}")
            extra = [p for p, v in given.items() if v is not None and p not in names]
            if extra:
                raise _bad(f"{family} does not take --{' --'.join(extra)}")
            dataset = gen_marginal(MarginalSpec(family, tuple(given[p] for p in names)), n, seed)
    except ValueError as exc:
        raise _bad(str(exc)) from None
    out = _fresh_file(out)
    side = _fresh_file(out.with_suffix(".provenance.json"))
    write_new(out, dataset_csv(dataset))
    write_new(side, dump_json({**dataset.provenance, "columns": dataset.columns}))
    click.echo(f"wrote {dataset.n} x {dataset.dims} table to {out}")


# -- train -------------------------------------------------------------------

def _model_options(fn):
    opts = [
        click.option("--latent-dim", type=int, default=None,
                     help="Latent size d (default 2 for 1D data, 4 otherwise)."),
        click.option("--phases", type=int, default=10, show_default=True),
        click.option("--beta", type=float, default=1.0, show_default=True),
        click.option("--hidden", default="64,64", show_default=True,
                     help="Hidden layer widths of encoder and decoder trunk."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _check_model_args(latent_dim, phases, beta, dims) -> int:
    latent = latent_dim if latent_dim is not None else (2 if dims == 1 else 4)
    if latent < 1:
        raise _bad("parameter must be positive: --latent-dim")
    if phases < 1:
        raise _bad("parameter must be positive: --phases")
    _positive("beta", beta, allow_zero=True)
    return latent


def _echo_epoch(prefix=""):
    def show(rec):
        click.echo(f"{prefix}epoch {rec['epoch']:3d}  lr {rec['lr']:.2e}  nll {rec['nll']:.5f}  "
                   f"kl {rec['kl']:.5f}  {rec['seconds']:.2f}s", err=True)
    return show


def run_training(values: np.ndarray, decoder: str, latent: int, phases: int, beta: float,
                 hidden, cfg: TrainConfig, run_dir: Path, dry_run: bool = False,
                 quiet: bool = False):
    """Train one configuration into ``run_dir``; returns (checkpoint path, log, models)."""
    D = values.shape[1]
    start = time.perf_counter()
    if decoder == "independent-ph":
        if dry_run:
            raise _bad("--dry-run is not supported for independent-ph")
        models, logs = train_independent(values, cfg, latent, phases, beta, hidden, run_dir)
        log = combine_logs(logs)
        members = [f"dim_{j}/epoch_{cfg.epochs}.json" for j in range(D)]
        ckpt = run_dir / f"epoch_{cfg.epochs}.json"
        write_new(ckpt, dump_json({"decoder_kind": "independent-ph", "members": members}))
        write_new(run_dir / "log.json", dump_json(log.to_json()))
        write_new(run_dir / "log.csv", log.to_csv())
        write_new(run_dir / "timing.json", dump_json(log.to_json(timing=True)))
    else:
        rng = init_rng(cfg.seed)
        if decoder == "ph":
            model = PhVaeModel.init(D, latent, phases, beta, hidden, rng)
        else:
            model = GaussianVaeModel.init(D, latent, beta, hidden, rng)
        trained, log = train(model, values, cfg, None if dry_run else run_dir, dry_run,
                             None if quiet else _echo_epoch())
        models = [trained]
        ckpt = run_dir / f"epoch_{cfg.epochs}.json"
        if dry_run:
            ckpt = run_dir / "epoch_0.json"
            write_new(ckpt, dump_json(model_to_json(trained)))
    total = time.perf_counter() - start
    timing = run_dir / "timing_total.json"
    write_new(timing, dump_json({"total_seconds": total}))
    return ckpt, log, models


@main.command("train")
@config_option
@click.option("--data", type=click.Path(dir_okay=False), required=True, help="Training CSV.")
@click.option("--decoder", type=click.Choice(["ph", "gaussian", "independent-ph"]), default="ph",
              show_default=True)
@click.option("--dims", type=int, default=None, help="Expected number of data columns.")
@_model_options
@train_options
@seed_option
@click.option("--dry-run", is_flag=True, help="Write the initialized model without training.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="New run directory.")
def train_cmd(data, decoder, dims, latent_dim, phases, beta, hidden, lr0, weight_decay, clip_norm,
              epochs, batch_size, tolerance, max_terms, seed, dry_run, out):
    """Train a PH-VAE, a Gaussian-decoder VAE or independent per-column PH-VAEs."""
    dataset = _read_dataset(data)
    if dims is not None and dims != dataset.dims:
        raise _bad(f"--dims {dims} but {data} has {dataset.dims} columns")
    latent = _check_model_args(latent_dim, phases, beta, dataset.dims)
    hidden = _parse_hidden(hidden)
    cfg = _train_config(seed, lr0, weight_decay, clip_norm, epochs, batch_size, tolerance,
                        max_terms)
    run_dir = _fresh_dir(out)
    resolved = {"data": str(data), "decoder": decoder, "dims": dataset.dims, "latent_dim": latent,
                "phases": phases if decoder != "gaussian" else 0, "beta": beta,
                "hidden": list(hidden), "lr0": lr0, "weight_decay": weight_decay,
                "clip_norm": clip_norm, "epochs": epochs, "batch_size": batch_size,
                "tolerance": tolerance, "max_terms": max_terms, "seed": seed,
                "dry_run": dry_run}
    write_new(run_dir / "config.json", dump_json(resolved))
    with _Runtime():
        ckpt, log, _ = run_training(dataset.values, decoder, latent, phases, beta, hidden, cfg,
                                    run_dir, dry_run)
    click.echo(f"checkpoint {ckpt}")
    if not dry_run:
        click.echo(f"final_nll {fmt_float(log.final_nll)}")


# -- sample ------------------------------------------------------------------

def sample_models(models, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if len(models) == 1:
        return generate(models[0], n, rng)
    return generate_independent(models, n, rng)


@main.command()
@config_option
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--n", type=int, default=100_000, show_default=True)
@seed_option
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def sample(checkpoint, n, seed, out):
    """Draw n rows by ancestral sampling from a checkpoint."""
    if n < 0:
        raise _bad("--n must be >= 0")
    out = _fresh_file(out)
    try:
        models = load_checkpoint(checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise _bad(f"cannot read checkpoint {checkpoint}: {exc}") from None
    with _Runtime():
        x = sample_models(models, n, seed)
    header = [f"x{j}" for j in range(x.shape[1])]
    write_new(out, write_table_csv(header, x.tolist()))
    click.echo(f"wrote {x.shape[0]} x {x.shape[1]} samples to {out}")


# -- eval --------------------------------------------------------------------

def _ccdf_csv(gen: np.ndarray) -> str:
    rows = []
    multi = gen.shape[1] > 1
    for j in range(gen.shape[1]):
        xs, surv = empirical_ccdf(gen[:, j])
        rows += [([j] if multi else []) + [float(a), float(b)] for a, b in zip(xs, surv)]
    return write_table_csv((["dim"] if multi else []) + ["x", "survival"], rows)


def _eval_one(gen, real, truth, ks_q, q_level, coex_q, thresholds) -> MetricsReport:
    try:
        return evaluate(gen, real, truth, ks_q, q_level, coex_q, thresholds)
    except ValueError as exc:
        raise _bad(str(exc)) from None


@main.command("eval")
@config_option
@click.option("--gen", "gen_paths", multiple=True, required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Generated CSV; repeat for one table per seed.")
@click.option("--real", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--truth", multiple=True,
              help="Analytic marginal per column, e.g. pareto:2.4,1.0 (repeat per column).")
@click.option("--ks-q", type=float, default=0.95, show_default=True)
@click.option("--q-level", type=float, default=0.99, show_default=True)
@click.option("--coex-q", type=float, multiple=True, default=(0.95, 0.99), show_default=True)
@click.option("--thresholds", type=click.Choice(["real", "own"]), default="real",
              show_default=True, help="Co-exceedance thresholds for the generated table.")
@click.option("--ccdf", type=click.Path(dir_okay=False), default=None,
              help="Write (x, survival) points of the generated table.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Report JSON.")
def eval_cmd(gen_paths, real, truth, ks_q, q_level, coex_q, thresholds, ccdf, out):
    """Tail and dependence metrics of generated tables."""
    truth_specs = _parse_truth(truth)
    if real is None and truth_specs is None:
        raise _bad("need --real and/or --truth")
    real_x = _read_dataset(real).values if real is not None else None
    out_path = _fresh_file(out) if out else None
    ccdf_path = _fresh_file(ccdf) if ccdf else None
    gens = [_read_table(p) for p in gen_paths]
    reports = [_eval_one(g, real_x, truth_specs, ks_q, q_level, coex_q, thresholds) for g in gens]
    if len(reports) == 1:
        payload = reports[0].to_json()
        click.echo(reports[0].table(), nl=False)
    else:
        agg = aggregate(reports)
        payload = {"runs": [r.to_json() for r in reports], "aggregate": agg}
        width = max(len(k) for k in agg)
        for key, v in agg.items():
            click.echo(f"{key:<{width}}  {v['mean']:.6f} +/- {v['sd']:.6f}  (runs={v['runs']})")
    if out_path:
        write_new(out_path, dump_json(payload))
    if ccdf_path:
        write_new(ccdf_path, _ccdf_csv(gens[0]))


# -- fit-ph ------------------------------------------------------------------

@main.command("fit-ph")
@config_option
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--column", default=None, help="Column to fit (default: the only column).")
@click.option("--phases", type=int, required=True)
@click.option("--lr0", type=float, default=0.05, show_default=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--batch-size", type=int, default=512, show_default=True)
@click.option("--tolerance", type=float, default=1e-8, show_default=True)
@click.option("--max-terms", type=int, default=10_000, show_default=True)
@seed_option
@click.option("--ccdf", type=click.Path(dir_okay=False), default=None,
              help="Write empirical and fitted survival at the data points.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def fit_ph_cmd(data, column, phases, lr0, epochs, batch_size, tolerance, max_terms, seed, ccdf,
               out):
    """Maximum-likelihood fit of one canonical PH distribution to a column."""
    if phases < 1:
        raise _bad("--phases must be >= 1")
    dataset = _read_dataset(data)
    if column is None:
        if dataset.dims != 1:
            raise _bad(f"{data} has {dataset.dims} columns; choose one with --column")
        x = dataset.values[:, 0]
    else:
        if column not in dataset.columns:
            raise _bad(f"no column {column!r} in {data}")
        x = dataset.column(column)
    cfg = _train_config(seed, lr0, 0.0, 5.0, epochs, batch_size, tolerance, max_terms)
    out = _fresh_file(out)
    ccdf_path = _fresh_file(ccdf) if ccdf else None
    with _Runtime():
        ph, history = fit_ph(x, phases, cfg)
        nll = ph_mean_nll(ph, x, cfg.uniformization)
        payload = {**ph_to_json(ph), "phases": phases, "nll": nll, "history": history}
        if ccdf_path:
            xs, surv = empirical_ccdf(x)
            fitted = np.asarray(ph_ccdf(ph, xs, cfg.uniformization))
            rows = [[float(a), float(b), float(c)] for a, b, c in zip(xs, surv, fitted)]
    write_new(out, dump_json(payload))
    if ccdf_path:
        write_new(ccdf_path, write_table_csv(["x", "empirical", "fitted"], rows))
    click.echo(f"phases {phases}  nll {fmt_float(nll)}")


# -- ablate ------------------------------------------------------------------

def _parse_grid(cells) -> list[tuple[str, int, float]]:
    grid = []
    for cell in cells:
        try:
            m_text, beta_text = cell.split(":")
            m, beta = int(m_text), float(beta_text)
        except ValueError:
            raise _bad(f"grid cell must look like 'm:beta', got {cell!r}") from None
        if m < 1:
            raise _bad("parameter must be positive: m")
        _positive("beta", beta, allow_zero=True)
        grid.append((f"m={m} beta={beta:g}", m, beta))
    return grid


@main.command()
@config_option
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--truth", multiple=True, help="Analytic marginal per column for tail metrics.")
@click.option("--grid", "cells", multiple=True, help="Cell 'm:beta'; repeat. Default: 5 variants.")
@click.option("--full-grid", is_flag=True, help="All of m in {5,10,15} x beta in {0.5,1,2}.")
@click.option("--runs", type=int, default=1, show_default=True,
              help="Independent seeds per cell (seed, seed+1, ...).")
@click.option("--n-gen", type=int, default=100_000, show_default=True)
@click.option("--latent-dim", type=int, default=None)
@click.option("--hidden", default="64,64", show_default=True)
@train_options
@seed_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
def ablate(data, truth, cells, full_grid, runs, n_gen, latent_dim, hidden, lr0, weight_decay,
           clip_norm, epochs, batch_size, tolerance, max_terms, seed, out):
    """Train and evaluate PH-VAEs over a grid of (m, beta)."""
    dataset = _read_dataset(data)
    truth_specs = _parse_truth(truth)
    if cells and full_grid:
        raise _bad("use either --grid or --full-grid")
    if full_grid:
        grid = [(f"m={m} beta={b:g}", m, b) for m in (5, 10, 15) for b in (0.5, 1.0, 2.0)]
    elif cells:
        grid = _parse_grid(cells)
    else:
        grid = list(DEFAULT_GRID)
    if runs < 1 or n_gen < 1:
        raise _bad("--runs and --n-gen must be >= 1")
    latent = _check_model_args(latent_dim, 1, 1.0, dataset.dims)
    hidden = _parse_hidden(hidden)
    base = _train_config(seed, lr0, weight_decay, clip_norm, epochs, batch_size, tolerance,
                         max_terms)
    out_dir = _fresh_dir(out)
    rows, timing_rows = [], []
    metrics = ("ks_tail", "coex_err_99", "q99_rel_err", "final_nll")
    for index, (variant, m, beta) in enumerate(grid):
        per_run = {k: [] for k in metrics}
        for r in range(runs):
            run_seed = seed + r
            cfg = _train_config(run_seed, base.lr0, base.weight_decay, base.clip_norm, base.epochs,
                                base.batch_size, tolerance, max_terms)
            run_dir = _fresh_dir(out_dir / f"cell_{index}_seed_{run_seed}")
            click.echo(f"[{variant}] seed {run_seed}", err=True)
            with _Runtime():
                _, log, models = run_training(dataset.values, "ph", latent, m, beta, hidden, cfg,
                                              run_dir, quiet=True)
                gen_x = sample_models(models, n_gen, run_seed)
            report = _eval_one(gen_x, dataset.values, truth_specs, 0.95, 0.99, (0.99,), "real")
            per_run["ks_tail"].append(_mean_or_none(report.ks_tail))
            per_run["coex_err_99"].append(report.coex_err.get("0.99"))
            per_run["q99_rel_err"].append(_mean_or_none(report.q99_rel_err))
            per_run["final_nll"].append(log.final_nll)
            secs = log.seconds_per_epoch
            timing_rows.append([variant, m, float(beta), run_seed, float(np.mean(secs)),
                                float(np.sum(secs))])
        row = [variant, m, float(beta)]
        for key in metrics:
            row += _mean_sd(per_run[key])
        rows.append(row)
        click.echo(f"{variant:<22} m={m:<3d} beta={beta:<4g} ks_tail={_show(row[3])} "
                   f"coex99={_show(row[5])} q99={_show(row[7])} nll={_show(row[9])}")
    header = ["variant", "m", "beta"]
    for key in metrics:
        header += [f"{key}_mean", f"{key}_sd"]
    write_new(out_dir / "ablation.csv", write_table_csv(header, rows))
    write_new(out_dir / "ablation_timing.csv",
              write_table_csv(["variant", "m", "beta", "seed", "seconds_per_epoch",
                               "total_seconds"], timing_rows))


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _mean_sd(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return [None, None]
    arr = np.array(vals, dtype=float)
    return [float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0]


def _show(v):
    return "NA" if v is None else f"{v:.4f}"


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
