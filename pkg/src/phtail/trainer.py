"""Training loop: Adam with decoupled weight decay, global-norm clipping and a
step learning-rate decay (x0.1 every ten epochs)."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .jsonio import dump_json
from .model import (Model, PhVaeModel, X_FLOOR, elbo_terms, encode, generate, model_from_json,
                    model_to_json, reconstruction)
from .ph import DEFAULT_CONFIG, CanonicalPH, UniformizationConfig, canonical_log_pdf_batch, moment

__all__ = [
    "TrainConfig",
    "TrainLog",
    "TrainingError",
    "Adam",
    "clip_global_norm",
    "learning_rate",
    "train",
    "eval_nll",
    "evaluate_elbo",
    "train_independent",
    "generate_independent",
    "fit_ph",
    "ph_mean_nll",
    "init_rng",
    "write_run",
    "combine_logs",
    "load_checkpoint",
]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    weight_decay: float = 1e-5
    clip_norm: float = 5.0
    epochs: int = 13
    batch_size: int = 256
    seed: int = 0
    lr_decay: float = 0.1
    lr_decay_every: int = 10
    uniformization: UniformizationConfig = DEFAULT_CONFIG

    def __post_init__(self):
        for name in ("lr0", "clip_norm", "lr_decay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ValueError("epochs, batch_size and lr_decay_every must be >= 1")


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    final_nll: float = math.nan

    def records(self, timing: bool = False) -> list[dict]:
        keys = ["epoch", "lr", "nll", "elbo", "kl"] + (["seconds"] if timing else [])
        return [{k: rec[k] for k in keys} for rec in self.epochs]

    def to_json(self, timing: bool = False) -> dict:
        return {"epochs": self.records(timing), "final_nll": self.final_nll}

    def to_csv(self, timing: bool = False) -> str:
        rows = self.records(timing)
        keys = ["epoch", "lr", "nll", "elbo", "kl"] + (["seconds"] if timing else [])
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(keys)
        for rec in rows:
            writer.writerow([rec["epoch"]] + [format(rec[k], ".17g") for k in keys[1:]])
        return buf.getvalue()

    @property
    def seconds_per_epoch(self) -> list[float]:
        return [rec["seconds"] for rec in self.epochs]


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """``lr0 * decay ** (epoch // every)`` for a zero-based epoch index."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def clip_global_norm(grads: Sequence[np.ndarray], cap: float) -> tuple[list[np.ndarray], float]:
    """Rescale all gradients together so their joint L2 norm is at most ``cap``."""
    if not cap > 0:
        raise ValueError("cap must be positive")
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > cap:
        scale = cap / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


class Adam:
    """Adam with bias correction and decoupled weight decay; updates arrays in place."""

    def __init__(self, params: Sequence[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= lr * update


def _check_data(data) -> np.ndarray:
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("dataset must be a non-empty n x D table")
    if not np.all(np.isfinite(data)) or np.any(data < 0):
        raise ValueError("dataset entries must be finite and non-negative")
    return data


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def init_rng(seed: int) -> np.random.Generator:
    """Generator for weight initialization; disjoint from the shuffle and noise streams."""
    return _streams(seed, 3)[2]


def train(model: Model, data, cfg: TrainConfig = TrainConfig(), run_dir: str | Path | None = None,
          dry_run: bool = False,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[Model, TrainLog]:
    """Fit ``model`` to ``data`` by maximizing the single-sample ELBO.

    The input model is left untouched; a trained copy is returned.  Batches
    are shuffled and posterior noise is drawn from generators derived from
    ``cfg.seed`` only, so identical inputs give bitwise-identical parameters.
    """
    data = _check_data(data)
    if data.shape[1] != model.dims:
        raise ValueError(f"model expects {model.dims} columns, data has {data.shape[1]}")
    model = model.copy()
    log = TrainLog()
    if dry_run:
        return model, log
    shuffle_rng, noise_rng = _streams(cfg.seed, 2)
    params = model.parameters()
    opt = Adam(params, weight_decay=cfg.weight_decay)
    n = data.shape[0]
    for epoch in range(cfg.epochs):
        lr = learning_rate(epoch, cfg)
        start = time.perf_counter()
        perm = shuffle_rng.permutation(n)
        tot_recon = tot_kl = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            xb = data[perm[lo:lo + cfg.batch_size]]
            eps = noise_rng.standard_normal((xb.shape[0], model.latent_dim))
            tape = Tape()
            recon, kl = elbo_terms(model, tape, xb, eps, cfg.uniformization)
            loss = ad.negate(ad.mean(ad.sub(recon, ad.mul(kl, model.beta))))
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            tape.backward(loss)
            grads = [tape.grad_of(p) for p in params]
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"non-finite gradient at epoch {epoch}, batch {b}")
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            opt.step(grads, lr)
            tot_recon += float(recon.value.sum())
            tot_kl += float(kl.value.sum())
        rec = {"epoch": epoch, "lr": lr, "nll": -tot_recon / n,
               "elbo": (tot_recon - model.beta * tot_kl) / n, "kl": tot_kl / n,
               "seconds": time.perf_counter() - start}
        log.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    log.final_nll = eval_nll(model, data, cfg.uniformization)
    if run_dir is not None:
        write_run(run_dir, model, log, cfg.epochs)
    return model, log


def write_run(run_dir, model: Model, log: TrainLog, epoch: int) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / f"epoch_{epoch}.json"
    ckpt.write_text(dump_json(model_to_json(model)))
    (run_dir / "log.json").write_text(dump_json(log.to_json()))
    (run_dir / "log.csv").write_text(log.to_csv())
    (run_dir / "timing.json").write_text(dump_json(log.to_json(timing=True)))
    return ckpt


def eval_nll(model: Model, data, cfg: UniformizationConfig = DEFAULT_CONFIG,
             batch_size: int = 1024) -> float:
    """Mean of ``-sum_j log p(x_j | z)`` with ``z`` at the posterior mean."""
    data = _check_data(data)
    total = 0.0
    for lo in range(0, data.shape[0], batch_size):
        xb = data[lo:lo + batch_size]
        tape = Tape()
        mu, _ = encode(model, tape, xb)
        total += float(reconstruction(model, tape, mu, xb, cfg).value.sum())
    return -total / data.shape[0]


def evaluate_elbo(model: Model, data, eps, cfg: UniformizationConfig = DEFAULT_CONFIG,
                  batch_size: int = 1024) -> np.ndarray:
    """Per-row single-sample ELBO for fixed noise ``eps`` (one row per datum)."""
    data = _check_data(data)
    eps = np.asarray(eps, dtype=float)
    out = []
    for lo in range(0, data.shape[0], batch_size):
        tape = Tape()
        recon, kl = elbo_terms(model, tape, data[lo:lo + batch_size],
                               eps[lo:lo + batch_size], cfg)
        out.append(recon.value - model.beta * kl.value)
    return np.concatenate(out)


def train_independent(data, cfg: TrainConfig = TrainConfig(), latent_dim: int = 2,
                      phases: int = 10, beta: float = 1.0, hidden=(64, 64),
                      run_dir: str | Path | None = None) -> tuple[list[PhVaeModel], list[TrainLog]]:
    """One univariate PH-VAE per column, no shared latent."""
    data = _check_data(data)
    D = data.shape[1]
    seeds = np.random.SeedSequence(cfg.seed).generate_state(D)
    models, logs = [], []
    for j in range(D):
        member = PhVaeModel.init(1, latent_dim, phases, beta, hidden, init_rng(int(seeds[j])))
        sub_dir = None if run_dir is None else Path(run_dir) / f"dim_{j}"
        trained, log = train(member, data[:, j:j + 1], replace(cfg, seed=int(seeds[j])), sub_dir)
        models.append(trained)
        logs.append(log)
    return models, logs


def generate_independent(models: Sequence[Model], n: int, rng: np.random.Generator) -> np.ndarray:
    """Column ``j`` comes from ``models[j]``; columns use separate child streams."""
    if n < 0:
        raise ValueError("n must be non-negative")
    streams = rng.spawn(len(models))
    cols = [generate(m, n, s)[:, 0] for m, s in zip(models, streams)]
    return np.stack(cols, axis=1) if cols else np.zeros((n, 0))


def _inverse_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def fit_ph(data, phases: int, cfg: TrainConfig | None = None,
           uniformization: UniformizationConfig | None = None) -> tuple[CanonicalPH, list[float]]:
    """Maximum-likelihood fit of a single canonical PH by Adam on the mean log-density.

    Parameters are the softmax logits of ``alpha`` and the softplus inputs of
    the rate increments, so every iterate is a valid canonical PH.  Returns the
    fitted PH and the per-epoch mean negative log-likelihood.
    """
    if phases < 1:
        raise ValueError("number of phases must be >= 1")
    x = _check_data(data)
    if x.shape[1] != 1:
        raise ValueError("fit_ph expects a single column")
    x = np.maximum(x[:, 0], X_FLOOR)
    cfg = cfg or TrainConfig(lr0=0.05, weight_decay=0.0, epochs=30, batch_size=512)
    ucfg = uniformization or cfg.uniformization
    logits = np.zeros(phases)
    # rates c * (1..m); pick c so the initial mean equals the sample mean
    base = CanonicalPH(np.full(phases, 1.0 / phases), np.arange(1.0, phases + 1.0))
    c = moment(base, 1) / float(x.mean())
    raw = _inverse_softplus(np.full(phases, c))
    params = [logits, raw]
    opt = Adam(params, weight_decay=cfg.weight_decay)
    shuffle_rng = _streams(cfg.seed, 1)[0]
    history = []
    n = x.size
    for epoch in range(cfg.epochs):
        lr = learning_rate(epoch, cfg)
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            xb = x[perm[lo:lo + cfg.batch_size]]
            tape = Tape()
            a = ad.softmax(tape.param(logits))
            r = ad.cumsum(ad.softplus(tape.param(raw)))
            nb = xb.size
            a_b = ad.mul(a, np.ones((nb, 1)))
            r_b = ad.mul(r, np.ones((nb, 1)))
            lp = ad.ph_log_pdf(a_b, r_b, xb, ucfg)
            loss = ad.negate(ad.mean(lp))
            tape.backward(loss)
            grads, _ = clip_global_norm([tape.grad_of(p) for p in params], cfg.clip_norm)
            opt.step(grads, lr)
            total += float(lp.value.sum())
        history.append(-total / n)
    return _canonical_from_raw(logits, raw), history


def _canonical_from_raw(logits, raw) -> CanonicalPH:
    z = logits - logits.max()
    a = np.exp(z) / np.exp(z).sum()
    return CanonicalPH(a, np.cumsum(np.logaddexp(0.0, raw)))


def ph_mean_nll(ph: CanonicalPH, data, cfg: UniformizationConfig = DEFAULT_CONFIG,
                batch_size: int = 4096) -> float:
    """Mean negative log-density of ``data`` under a single canonical PH."""
    x = np.maximum(_check_data(data)[:, 0], X_FLOOR)
    total = 0.0
    for lo in range(0, x.size, batch_size):
        xb = x[lo:lo + batch_size]
        a = np.broadcast_to(ph.alpha, (xb.size, ph.m))
        r = np.broadcast_to(ph.rates, (xb.size, ph.m))
        total += float(canonical_log_pdf_batch(a, r, xb, cfg)[0].sum())
    return -total / x.size


def combine_logs(logs: Sequence[TrainLog]) -> TrainLog:
    """Sum per-dimension logs of independently trained members epoch by epoch."""
    out = TrainLog()
    for recs in zip(*(log.epochs for log in logs)):
        out.epochs.append({
            "epoch": recs[0]["epoch"], "lr": recs[0]["lr"],
            **{k: float(sum(r[k] for r in recs)) for k in ("nll", "elbo", "kl", "seconds")},
        })
    out.final_nll = float(sum(log.final_nll for log in logs))
    return out


def load_checkpoint(path: str | Path) -> list[Model]:
    """Models stored at ``path``: one for a joint model, one per column for a manifest."""
    path = Path(path)
    obj = json.loads(path.read_text(encoding="utf-8"))
    if obj.get("decoder_kind") == "independent-ph":
        return [model_from_json(json.loads((path.parent / member).read_text(encoding="utf-8")))
                for member in obj["members"]]
    return [model_from_json(obj)]
