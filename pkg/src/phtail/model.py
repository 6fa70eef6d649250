"""Variational autoencoders with a phase-type or a Gaussian decoder.

Both models share the same Gaussian encoder.  The encoder sees ``log1p(x)``
so that heavy-tailed inputs do not saturate the first layer; the decoders
always work on ``x`` in data units.

The phase-type decoder maps ``z`` through a trunk MLP to a hidden vector
``h`` and then, per data dimension ``j``, through two linear heads::

    alpha_j  = softmax(W_j^alpha h)
    lambda_j = cumsum(softplus(W_j^lambda h))

which always yields a valid series canonical PH (positive, non-decreasing
rates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import MlpParams, Node, Tape, mlp_forward
from .ph import DEFAULT_CONFIG, CanonicalPH, UniformizationConfig, sample_canonical_batch

__all__ = [
    "LOGVAR_MIN",
    "LOGVAR_MAX",
    "X_FLOOR",
    "PhVaeModel",
    "GaussianVaeModel",
    "PhParams",
    "encode",
    "reparameterize",
    "decode_ph",
    "decode_gaussian",
    "kl_gaussian",
    "gaussian_log_pdf",
    "elbo_terms",
    "elbo",
    "generate",
    "model_to_json",
    "model_from_json",
]

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0
X_FLOOR = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PhVaeModel:
    latent_dim: int
    phases: int
    dims: int
    beta: float
    encoder: MlpParams
    trunk: MlpParams
    head_alpha_W: np.ndarray
    head_alpha_b: np.ndarray
    head_rate_W: np.ndarray
    head_rate_b: np.ndarray

    kind = "ph"

    def __post_init__(self):
        width = self.dims * self.phases
        hidden = self.trunk.sizes[-1]
        if self.encoder.sizes[0] != self.dims or self.encoder.sizes[-1] != 2 * self.latent_dim:
            raise ValueError("encoder must map D inputs to 2d outputs")
        if self.trunk.sizes[0] != self.latent_dim:
            raise ValueError("decoder trunk must take d inputs")
        for W, b in ((self.head_alpha_W, self.head_alpha_b), (self.head_rate_W, self.head_rate_b)):
            if W.shape != (hidden, width) or b.shape != (width,):
                raise ValueError(f"head shapes {W.shape}/{b.shape}, expected ({hidden}, {width})")

    @classmethod
    def init(cls, dims: int, latent_dim: int = 2, phases: int = 10, beta: float = 1.0,
             hidden: tuple[int, ...] = (64, 64), rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        encoder = MlpParams.init([dims, *hidden, 2 * latent_dim], rng)
        trunk = MlpParams.init([latent_dim, *hidden], rng)
        heads = MlpParams.init([hidden[-1], dims * phases], rng)
        rate_heads = MlpParams.init([hidden[-1], dims * phases], rng)
        return cls(latent_dim, phases, dims, float(beta), encoder, trunk,
                   heads.weights[0], heads.biases[0], rate_heads.weights[0], rate_heads.biases[0])

    def parameters(self) -> list[np.ndarray]:
        return (self.encoder.arrays() + self.trunk.arrays()
                + [self.head_alpha_W, self.head_alpha_b, self.head_rate_W, self.head_rate_b])

    def copy(self) -> "PhVaeModel":
        return PhVaeModel(self.latent_dim, self.phases, self.dims, self.beta,
                          self.encoder.copy(), self.trunk.copy(),
                          self.head_alpha_W.copy(), self.head_alpha_b.copy(),
                          self.head_rate_W.copy(), self.head_rate_b.copy())


@dataclass
class GaussianVaeModel:
    latent_dim: int
    dims: int
    beta: float
    encoder: MlpParams
    decoder: MlpParams

    kind = "gaussian"
    phases = 0

    def __post_init__(self):
        if self.encoder.sizes[0] != self.dims or self.encoder.sizes[-1] != 2 * self.latent_dim:
            raise ValueError("encoder must map D inputs to 2d outputs")
        if self.decoder.sizes[0] != self.latent_dim or self.decoder.sizes[-1] != 2 * self.dims:
            raise ValueError("decoder must map d inputs to 2D outputs")

    @classmethod
    def init(cls, dims: int, latent_dim: int = 2, beta: float = 1.0,
             hidden: tuple[int, ...] = (64, 64), rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        encoder = MlpParams.init([dims, *hidden, 2 * latent_dim], rng)
        decoder = MlpParams.init([latent_dim, *hidden, 2 * dims], rng)
        return cls(latent_dim, dims, float(beta), encoder, decoder)

    def parameters(self) -> list[np.ndarray]:
        return self.encoder.arrays() + self.decoder.arrays()

    def copy(self) -> "GaussianVaeModel":
        return GaussianVaeModel(self.latent_dim, self.dims, self.beta,
                                self.encoder.copy(), self.decoder.copy())


Model = PhVaeModel | GaussianVaeModel


class PhParams(NamedTuple):
    """Decoded PH parameters; both nodes have shape ``(batch, D, m)``."""

    alpha: Node
    rates: Node

    def canonical(self, row: int = 0) -> list[CanonicalPH]:
        return [CanonicalPH(a, r) for a, r in zip(self.alpha.value[row], self.rates.value[row])]


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def encode(model: Model, tape: Tape, x) -> tuple[Node, Node]:
    """Posterior mean and clamped log-variance, each ``(batch, d)``."""
    x = _as_batch(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("encoder input must be finite")
    if np.any(x < 0):
        raise ValueError("encoder input must be non-negative")
    out = mlp_forward(model.encoder, tape.constant(np.log1p(x)))
    d = model.latent_dim
    mu = ad.take(out, 0, d)
    logvar = ad.clamp(ad.take(out, d, 2 * d), LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar


def reparameterize(mu: Node, logvar: Node, eps) -> Node:
    eps = np.asarray(eps, dtype=float)
    if eps.shape != mu.shape or logvar.shape != mu.shape:
        raise ad.ShapeError("mu, logvar and eps must share a shape")
    return ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))


def _lift_latent(tape: Tape, z) -> Node:
    if isinstance(z, Node):
        return z
    z = _as_batch(z)
    if not np.all(np.isfinite(z)):
        raise ValueError("latent input must be finite")
    return tape.constant(z)


def decode_ph(model: PhVaeModel, tape: Tape, z) -> PhParams:
    z = _lift_latent(tape, z)
    h = ad.relu(mlp_forward(model.trunk, z))
    shape = (h.shape[0], model.dims, model.phases)
    logits = ad.add(ad.matmul(h, tape.param(model.head_alpha_W)), tape.param(model.head_alpha_b))
    raw = ad.add(ad.matmul(h, tape.param(model.head_rate_W)), tape.param(model.head_rate_b))
    alpha = ad.softmax(ad.reshape(logits, shape))
    rates = ad.cumsum(ad.softplus(ad.reshape(raw, shape)))
    return PhParams(alpha, rates)


def decode_gaussian(model: GaussianVaeModel, tape: Tape, z) -> tuple[Node, Node]:
    z = _lift_latent(tape, z)
    out = mlp_forward(model.decoder, z)
    D = model.dims
    mu = ad.take(out, 0, D)
    logvar = ad.clamp(ad.take(out, D, 2 * D), LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar


def kl_gaussian(mu: Node, logvar: Node) -> Node:
    """``KL(N(mu, diag(exp(logvar))) || N(0, I))`` summed over the last axis."""
    terms = ad.sub(ad.add(ad.exp(logvar), ad.square(mu)), ad.add(logvar, 1.0))
    return ad.mul(ad.sum(terms, axis=-1), 0.5)


def gaussian_log_pdf(x, mu: Node, logvar: Node) -> Node:
    """Diagonal normal log-density summed over the last axis."""
    diff = ad.sub(mu, np.asarray(x, dtype=float))
    quad = ad.mul(ad.square(diff), ad.exp(ad.negate(logvar)))
    per_dim = ad.mul(ad.add(ad.add(quad, logvar), _LOG_2PI), -0.5)
    return ad.sum(per_dim, axis=-1)


def _floored(x) -> np.ndarray:
    x = _as_batch(x)
    if np.any(~np.isfinite(x)) or np.any(x < 0):
        raise ValueError("observations must be finite and non-negative")
    return np.maximum(x, X_FLOOR)


def reconstruction(model: Model, tape: Tape, z, x,
                   cfg: UniformizationConfig = DEFAULT_CONFIG) -> Node:
    """``sum_j log p(x_j | z)`` per row, shape ``(batch,)``."""
    if model.kind == "ph":
        xf = _floored(x)
        params = decode_ph(model, tape, z)
        return ad.sum(ad.ph_log_pdf(params.alpha, params.rates, xf, cfg), axis=-1)
    mu, logvar = decode_gaussian(model, tape, z)
    return gaussian_log_pdf(_as_batch(x), mu, logvar)


def elbo_terms(model: Model, tape: Tape, x, eps,
               cfg: UniformizationConfig = DEFAULT_CONFIG) -> tuple[Node, Node]:
    """Per-row reconstruction log-likelihood and KL term, each ``(batch,)``."""
    x = _as_batch(x)
    mu, logvar = encode(model, tape, x)
    z = reparameterize(mu, logvar, np.asarray(eps, dtype=float).reshape(mu.shape))
    return reconstruction(model, tape, z, x, cfg), kl_gaussian(mu, logvar)


def elbo(model: Model, tape: Tape, x, eps, cfg: UniformizationConfig = DEFAULT_CONFIG) -> Node:
    """Batch mean of the single-sample ELBO ``recon - beta * KL`` (to be maximized)."""
    recon, kl = elbo_terms(model, tape, x, eps, cfg)
    return ad.mean(ad.sub(recon, ad.mul(kl, model.beta)))


def generate(model: Model, n: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral samples: ``z ~ N(0, I)``, then one draw from the decoder law."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.zeros((0, model.dims))
    z = rng.standard_normal((n, model.latent_dim))
    tape = Tape()
    if model.kind == "ph":
        params = decode_ph(model, tape, z)
        return sample_canonical_batch(params.alpha.value, params.rates.value, rng)
    mu, logvar = decode_gaussian(model, tape, z)
    noise = rng.standard_normal(mu.shape)
    return mu.value + np.exp(0.5 * logvar.value) * noise


def model_to_json(model: Model) -> dict:
    base = {"decoder_kind": model.kind,
            "hyper": {"latent_dim": model.latent_dim, "phases": model.phases,
                      "dims": model.dims, "beta": model.beta},
            "encoder": model.encoder.to_json()}
    if model.kind == "ph":
        base["decoder"] = {
            "trunk": model.trunk.to_json(),
            "heads": {"alpha": {"W": model.head_alpha_W.tolist(), "b": model.head_alpha_b.tolist()},
                      "lambda": {"W": model.head_rate_W.tolist(), "b": model.head_rate_b.tolist()}},
        }
    else:
        base["decoder"] = model.decoder.to_json()
    return base


def model_from_json(obj: dict) -> Model:
    hyper = obj["hyper"]
    encoder = MlpParams.from_json(obj["encoder"])
    kind = obj.get("decoder_kind")
    if kind == "ph":
        dec = obj["decoder"]
        heads = dec["heads"]
        return PhVaeModel(int(hyper["latent_dim"]), int(hyper["phases"]), int(hyper["dims"]),
                          float(hyper["beta"]), encoder, MlpParams.from_json(dec["trunk"]),
                          np.array(heads["alpha"]["W"], dtype=float),
                          np.array(heads["alpha"]["b"], dtype=float),
                          np.array(heads["lambda"]["W"], dtype=float),
                          np.array(heads["lambda"]["b"], dtype=float))
    if kind == "gaussian":
        return GaussianVaeModel(int(hyper["latent_dim"]), int(hyper["dims"]), float(hyper["beta"]),
                                encoder, MlpParams.from_json(obj["decoder"]))
    raise ValueError(f"unknown decoder kind {kind!r}")
