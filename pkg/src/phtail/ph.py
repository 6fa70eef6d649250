r"""Phase-type distributions evaluated through uniformization.

A phase-type (PH) distribution is the law of the absorption time of a
continuous-time Markov chain with ``m`` transient states and one absorbing
state.  It is given by an initial vector ``alpha`` and a sub-generator ``A``;
the exit rates are ``t = -A 1`` and

.. math::

    f(x) = \alpha e^{Ax} t, \qquad \bar F(x) = \alpha e^{Ax} \mathbf{1}.

All matrix exponentials here go through the Poisson-weighted series

.. math::

    e^{Ax} = \sum_k e^{-\Lambda x} \frac{(\Lambda x)^k}{k!} P^k,
    \qquad P = I + A / \Lambda,

with ``Lambda = max_i(-A_ii)`` and the series cut at the first ``K`` whose
remaining Poisson mass is below the configured tolerance.

>>> ph = CanonicalPH([1.0, 0.0], [1.0, 1.0])   # Erlang-2
>>> round(float(pdf(ph, 1.0)), 6)
0.367879
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "UniformizationError",
    "GeneralPH",
    "CanonicalPH",
    "UniformizationConfig",
    "LOG_PDF_SENTINEL",
    "expand_canonical",
    "canonical_from_general",
    "matexp_uniformized",
    "pdf",
    "cdf",
    "ccdf",
    "log_pdf",
    "moment",
    "laplace",
    "sample",
    "sample_n",
    "sample_multivariate",
    "sample_canonical_batch",
    "canonical_log_pdf_batch",
    "ph_to_json",
    "ph_from_json",
]

LOG_PDF_SENTINEL = -1e30
_ATOL = 1e-12
_SAMPLER_STEP_CAP = 10**7
MIN_TOLERANCE = 1e-13


class UniformizationError(RuntimeError):
    """The Poisson series needed more terms than ``max_terms`` allows."""


@dataclass(frozen=True)
class UniformizationConfig:
    """Truncation controls; ``tolerance`` is the Poisson tail mass left out."""

    tolerance: float = 1e-8
    max_terms: int = 10_000

    def __post_init__(self):
        # the running Poisson sum carries rounding of order 1e-16 per term
        if not MIN_TOLERANCE <= self.tolerance < 1:
            raise ValueError(f"tolerance must lie in [{MIN_TOLERANCE:g}, 1)")
        if self.max_terms < 1:
            raise ValueError("max_terms must be >= 1")


DEFAULT_CONFIG = UniformizationConfig()


class GeneralPH:
    """PH distribution with an arbitrary sub-generator ``A``."""

    def __init__(self, alpha, A):
        alpha = np.array(alpha, dtype=float).reshape(-1)
        A = np.array(A, dtype=float)
        m = alpha.size
        if m == 0 or A.shape != (m, m):
            raise ValueError(f"alpha has {m} entries but A has shape {A.shape}")
        if np.any(~np.isfinite(alpha)) or np.any(~np.isfinite(A)):
            raise ValueError("PH parameters must be finite")
        if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > _ATOL:
            raise ValueError("alpha must be a probability vector")
        if np.any(np.diag(A) >= 0):
            raise ValueError("diagonal of A must be strictly negative")
        off = A - np.diag(np.diag(A))
        if np.any(off < 0):
            raise ValueError("off-diagonal entries of A must be non-negative")
        if np.any(A.sum(axis=1) > _ATOL):
            raise ValueError("row sums of A must be <= 0")
        self.alpha = alpha
        self.A = A
        alpha.setflags(write=False)
        A.setflags(write=False)

    @property
    def m(self) -> int:
        return self.alpha.size

    @property
    def exit_rates(self) -> np.ndarray:
        return np.maximum(-self.A.sum(axis=1), 0.0)

    def __repr__(self):
        return f"GeneralPH(alpha={self.alpha.tolist()}, A={self.A.tolist()})"


class CanonicalPH:
    """Acyclic PH in series canonical form.

    Phase ``i`` is left at rate ``rates[i]`` towards phase ``i + 1``; only the
    last phase exits to absorption.  Rates must be positive and non-decreasing.
    """

    def __init__(self, alpha, rates):
        alpha = np.array(alpha, dtype=float).reshape(-1)
        rates = np.array(rates, dtype=float).reshape(-1)
        if alpha.size == 0 or alpha.shape != rates.shape:
            raise ValueError("alpha and rates must be non-empty and of equal length")
        if np.any(~np.isfinite(alpha)) or np.any(~np.isfinite(rates)):
            raise ValueError("PH parameters must be finite")
        if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > _ATOL:
            raise ValueError("alpha must be a probability vector")
        if np.any(rates <= 0):
            raise ValueError("rates must be strictly positive")
        if np.any(np.diff(rates) < 0):
            raise ValueError("rates must be non-decreasing")
        self.alpha = alpha
        self.rates = rates
        alpha.setflags(write=False)
        rates.setflags(write=False)

    @property
    def m(self) -> int:
        return self.alpha.size

    def __repr__(self):
        return f"CanonicalPH(alpha={self.alpha.tolist()}, rates={self.rates.tolist()})"


PH = Union[GeneralPH, CanonicalPH]


def expand_canonical(ph: CanonicalPH) -> GeneralPH:
    """Bidiagonal sub-generator of a series canonical PH."""
    m = ph.m
    A = np.diag(-ph.rates)
    A[np.arange(m - 1), np.arange(1, m)] = ph.rates[:-1]
    return GeneralPH(ph.alpha, A)


def canonical_from_general(ph: GeneralPH) -> CanonicalPH:
    """Read a bidiagonal sub-generator back into canonical form.

    Raises ``ValueError`` unless ``A`` has exactly the series canonical pattern.
    """
    A = ph.A
    m = ph.m
    rates = -np.diag(A)
    expected = np.diag(-rates)
    expected[np.arange(m - 1), np.arange(1, m)] = rates[:-1]
    if not np.array_equal(A, expected):
        raise ValueError("sub-generator is not in series canonical form")
    return CanonicalPH(ph.alpha, rates)


def _as_general(ph: PH) -> GeneralPH:
    if isinstance(ph, CanonicalPH):
        return expand_canonical(ph)
    return ph


def _uniformization_rate(A: np.ndarray) -> float:
    lam = float(np.max(-np.diag(A))) if A.size else 0.0
    return lam if lam > 0 else 1.0


def _check_x(x) -> np.ndarray:
    xs = np.asarray(x, dtype=float)
    if np.any(np.isnan(xs)) or np.any(xs < 0):
        raise ValueError("x must be non-negative")
    return xs


def _uniformized_rows(alpha: np.ndarray, A: np.ndarray, xs: np.ndarray,
                      cfg: UniformizationConfig) -> np.ndarray:
    """Return ``alpha @ expm(A x)`` for every x in ``xs`` (shape ``(len(xs), m)``).

    The vectors ``alpha P^k`` do not depend on x, so the recursion is shared
    and only the Poisson weights differ per point.
    """
    lam = _uniformization_rate(A)
    P = np.eye(A.shape[0]) + A / lam
    u = lam * xs
    with np.errstate(divide="ignore"):
        log_u = np.log(u)
    log_w = -u
    w = np.exp(log_w)
    cum = w.copy()
    v = alpha.copy()
    out = w[:, None] * v[None, :]
    k = 0
    while True:
        done = (1.0 - cum < cfg.tolerance) | (not np.any(v))
        if np.all(done):
            break
        k += 1
        if k > cfg.max_terms:
            raise UniformizationError(
                f"uniformization needs more than {cfg.max_terms} terms "
                f"(Lambda*x up to {float(u.max()):.6g})")
        v = v @ P
        log_w = log_w + log_u - math.log(k)
        w = np.exp(log_w)
        cum += w
        out += w[:, None] * v[None, :]
    return out


def matexp_uniformized(A, x: float, cfg: UniformizationConfig = DEFAULT_CONFIG) -> np.ndarray:
    """``expm(A x)`` for a sub-generator ``A`` by truncated uniformization."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    x = float(x)
    if not x >= 0:
        raise ValueError("x must be non-negative")
    m = A.shape[0]
    lam = _uniformization_rate(A)
    P = np.eye(m) + A / lam
    u = lam * x
    log_u = math.log(u) if u > 0 else -math.inf
    log_w = -u
    w = math.exp(log_w)
    cum = w
    Pk = np.eye(m)
    out = w * Pk
    k = 0
    while 1.0 - cum >= cfg.tolerance and np.any(Pk):
        k += 1
        if k > cfg.max_terms:
            raise UniformizationError(
                f"uniformization needs more than {cfg.max_terms} terms (Lambda*x = {u:.6g})")
        Pk = Pk @ P
        log_w += log_u - math.log(k)
        w = math.exp(log_w)
        cum += w
        out += w * Pk
    return out


def _evaluate(ph: PH, x, cfg, weight: Callable[[GeneralPH], np.ndarray]):
    g = _as_general(ph)
    xs = _check_x(x)
    rows = _uniformized_rows(g.alpha, g.A, xs.reshape(-1), cfg)
    vals = rows @ weight(g)
    return vals.reshape(xs.shape) if xs.ndim else float(vals[0])


def pdf(ph: PH, x, cfg: UniformizationConfig = DEFAULT_CONFIG):
    """Density ``alpha expm(A x) t``; accepts a scalar or an array of x."""
    return _evaluate(ph, x, cfg, lambda g: g.exit_rates)


def ccdf(ph: PH, x, cfg: UniformizationConfig = DEFAULT_CONFIG):
    return _evaluate(ph, x, cfg, lambda g: np.ones(g.m))


def cdf(ph: PH, x, cfg: UniformizationConfig = DEFAULT_CONFIG):
    s = ccdf(ph, x, cfg)
    return 1.0 - s


def log_pdf(ph: PH, x, cfg: UniformizationConfig = DEFAULT_CONFIG):
    """Log-density with ``LOG_PDF_SENTINEL`` wherever the density underflows to 0."""
    f = np.asarray(pdf(ph, x, cfg), dtype=float)
    with np.errstate(divide="ignore"):
        out = np.where(f > 0, np.log(np.where(f > 0, f, 1.0)), LOG_PDF_SENTINEL)
    return out if out.ndim else float(out)


def _solve_neg_generator(ph: PH, b: np.ndarray) -> np.ndarray:
    """Solve ``(-A) y = b``; back-substitution for canonical input."""
    if isinstance(ph, CanonicalPH):
        r = ph.rates
        y = np.empty_like(b)
        y[-1] = b[-1] / r[-1]
        for i in range(ph.m - 2, -1, -1):
            y[i] = (b[i] + r[i] * y[i + 1]) / r[i]
        return y
    try:
        return np.linalg.solve(-ph.A, b)
    except np.linalg.LinAlgError as exc:
        raise ValueError("sub-generator is singular") from exc


def moment(ph: PH, k: int) -> float:
    """Raw moment ``E[X^k] = k! alpha (-A)^{-k} 1``."""
    if int(k) != k or k < 1:
        raise ValueError("k must be a positive integer")
    y = np.ones(ph.m)
    for _ in range(int(k)):
        y = _solve_neg_generator(ph, y)
    val = math.factorial(int(k)) * float(ph.alpha @ y)
    if not np.isfinite(val):
        raise ValueError("sub-generator is singular")
    return val


def laplace(ph: PH, s: float) -> float:
    """Laplace transform ``alpha (sI - A)^{-1} t`` for ``s > 0``."""
    if not s > 0:
        raise ValueError("s must be positive")
    g = _as_general(ph)
    try:
        y = np.linalg.solve(s * np.eye(g.m) - g.A, g.exit_rates)
    except np.linalg.LinAlgError as exc:
        raise ValueError("sI - A is singular") from exc
    return float(g.alpha @ y)


def _chain_tables(ph: PH):
    """Cumulative start and jump probabilities plus holding rates, cached per PH."""
    tables = getattr(ph, "_chain", None)
    if tables is None:
        g = _as_general(ph)
        m = g.m
        rates = -np.diag(g.A)
        jump = np.hstack([g.A, g.exit_rates[:, None]]) / rates[:, None]
        jump[np.arange(m), np.arange(m)] = 0.0
        cum = np.cumsum(jump, axis=1)
        cum[:, -1] = 1.0
        start = np.cumsum(g.alpha)
        start[-1] = 1.0
        tables = (start.tolist(), (1.0 / rates).tolist(), [row.tolist() for row in cum])
        ph._chain = tables
    return tables


def sample(ph: PH, rng: np.random.Generator) -> float:
    """One absorption time, simulating the chain jump by jump.

    Start phase from ``alpha``; in phase ``s`` wait ``Exp(-A_ss)`` and move to
    ``j`` with probability ``A_sj / -A_ss`` or get absorbed with ``t_s / -A_ss``.
    """
    start, scale, cum = _chain_tables(ph)
    m = len(start)
    s = min(bisect.bisect_right(start, rng.random()), m - 1)
    x = 0.0
    for _ in range(_SAMPLER_STEP_CAP):
        x += rng.exponential(scale[s])
        s = bisect.bisect_right(cum[s], rng.random())
        if s >= m:
            return x
    raise RuntimeError("sampler exceeded the step cap; the generator is probably invalid")


def sample_n(ph: PH, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent absorption times, all chains simulated in lockstep."""
    g = _as_general(ph)
    A, m = g.A, g.m
    rates = -np.diag(A)
    jump = np.hstack([A, g.exit_rates[:, None]]) / rates[:, None]
    jump[np.arange(m), np.arange(m)] = 0.0
    cum_jump = np.cumsum(jump, axis=1)
    cum_jump[:, -1] = 1.0
    state = _categorical(np.broadcast_to(g.alpha, (n, m)), rng)
    x = np.zeros(n)
    active = np.arange(n)
    for _ in range(_SAMPLER_STEP_CAP):
        if active.size == 0:
            return x
        s = state[active]
        x[active] += rng.exponential(1.0 / rates[s])
        u = rng.random(active.size)
        nxt = (u[:, None] >= cum_jump[s]).sum(axis=1)
        state[active] = nxt
        active = active[nxt < m]
    raise RuntimeError("sampler exceeded the step cap; the generator is probably invalid")


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cum[..., -1]
    idx = (u[..., None] >= cum).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_multivariate(phs: Sequence[PH], rng: np.random.Generator) -> np.ndarray:
    """One draw per component, in index order from the same generator."""
    if len(phs) == 0:
        raise ValueError("need at least one PH component")
    return np.array([sample(ph, rng) for ph in phs])


def sample_canonical_batch(alpha: np.ndarray, rates: np.ndarray,
                           rng: np.random.Generator) -> np.ndarray:
    """Absorption times for a stack of canonical PHs, one draw each.

    ``alpha`` and ``rates`` have shape ``(..., m)``.  In series canonical form
    every phase but the last jumps to its successor with probability one, so
    the chain walk reduces to summing holding times from the start phase on.
    """
    alpha = np.asarray(alpha, dtype=float)
    rates = np.asarray(rates, dtype=float)
    shape, m = alpha.shape[:-1], alpha.shape[-1]
    a = alpha.reshape(-1, m)
    r = rates.reshape(-1, m)
    state = _categorical(a, rng)
    x = np.zeros(a.shape[0])
    active = np.arange(a.shape[0])
    for _ in range(m):
        if active.size == 0:
            break
        s = state[active]
        x[active] += rng.exponential(1.0 / r[active, s])
        state[active] = s + 1
        active = active[s + 1 < m]
    return x.reshape(shape)


_STORE_LIMIT = 16_000_000  # floats kept for the reverse sweep before recomputing


def _series(alpha, p, q, u, log_u, cfg, row_terms, store):
    """Run the Poisson-weighted recursion ``v_k = alpha P^k`` for canonical rows.

    Rows must be sorted so the rows still needing terms always form a prefix:
    by ``u`` descending when truncating adaptively (each row stops once its
    own Poisson tail is below tolerance), or by ``row_terms`` descending when
    row ``i`` must take exactly ``row_terms[i]`` terms.

    Returns ``(acc, row_terms, vs, ws)`` with ``acc = sum_k w_k v_k[-1]``.
    ``vs[k]``/``ws[k]`` cover the rows active at step ``k`` when ``store`` is
    set and they fit in memory, otherwise they are ``None``.
    """
    n, m = alpha.shape
    log_w = -u
    w = np.exp(log_w)
    cum = w.copy()
    v = alpha.copy()
    acc = w * v[:, -1]
    vs = [v] if store else None
    ws = [w] if store else None
    stored = n * m
    fixed = row_terms is not None
    counts = np.zeros(n, dtype=np.int64) if not fixed else np.asarray(row_terms, dtype=np.int64)
    a = n
    k = 0
    while a > 0:
        if fixed:
            a = int(np.count_nonzero(counts > k))
        else:
            busy = np.flatnonzero(~((1.0 - cum[:a] < cfg.tolerance) | ~v[:a].any(axis=1)))
            a = int(busy[-1]) + 1 if busy.size else 0
        if a == 0:
            break
        k += 1
        if k > cfg.max_terms:
            raise UniformizationError(
                f"uniformization needs more than {cfg.max_terms} terms "
                f"(Lambda*x up to {float(u.max()):.6g})")
        if not fixed:
            counts[:a] = k
        va = v[:a]
        nv = va * q[:a]
        nv[:, 1:] += va[:, :-1] * p[:a, :-1]
        v = nv
        log_w = log_w[:a] + log_u[:a] - math.log(k)
        w = np.exp(log_w)
        cum[:a] += w
        acc[:a] += w * v[:, -1]
        if vs is not None:
            stored += a * m
            if stored > _STORE_LIMIT:
                vs = ws = None
            else:
                vs.append(v)
                ws.append(w)
    return acc, counts, vs, ws


def _reverse_sweep(vs, ws, p, q, scale):
    """Adjoints of ``sum_k scale * w_k v_k[-1]`` w.r.t. ``alpha``, ``p`` and ``u``.

    ``vs[k]`` holds the rows active at step ``k``, a shrinking prefix.
    """
    n, m = p.shape
    dp = np.zeros((n, m))
    du = np.zeros(n)
    vbar = np.zeros((0, m))
    for k in range(len(vs) - 1, -1, -1):
        vk = vs[k]
        wk = ws[k]
        a = vk.shape[0]
        b = vbar.shape[0]
        new = np.zeros((a, m))
        if b:
            new[:b] = vbar * q[:b]
            new[:b, :-1] += vbar[:, 1:] * p[:b, :-1]
            dp[:b, :-1] += vk[:b, :-1] * (vbar[:, 1:] - vbar[:, :-1])
            dp[:b, -1] -= vk[:b, -1] * vbar[:, -1]
        new[:, -1] += scale[:a] * wk
        # d w_k / d u = w_{k-1} - w_k
        w_prev = ws[k - 1][:a] if k > 0 else 0.0
        du[:a] += scale[:a] * vk[:, -1] * (w_prev - wk)
        vbar = new
    return vbar, dp, du


def canonical_log_pdf_batch(alpha: np.ndarray, rates: np.ndarray, x: np.ndarray,
                            cfg: UniformizationConfig = DEFAULT_CONFIG,
                            terms=None, with_grad: bool = False):
    """Log-densities of many canonical PHs, each at its own point.

    ``alpha`` and ``rates`` have shape ``(n, m)`` and ``x`` shape ``(n,)``.
    Uniformization uses ``Lambda_i = rates[i, -1]`` and a truncation index
    chosen per row from the tolerance, so the work is ``sum_i K_i`` rather
    than ``n * max_i K_i``.  ``terms`` (an int, or one count per row as
    returned in ``K``) forces the indices instead.

    Returns ``(logf, K)`` or, with ``with_grad``, ``(logf, K, vjp)`` where
    ``K`` holds the per-row term counts and ``vjp(g)`` maps upstream
    gradients of shape ``(n,)`` to gradients with respect to ``alpha`` and
    ``rates``.  The vjp differentiates the truncated sum actually evaluated,
    including the dependence of ``Lambda`` on the last rate; rows at the
    sentinel get zero gradient.
    """
    alpha = np.asarray(alpha, dtype=float)
    rates = np.asarray(rates, dtype=float)
    x = np.asarray(x, dtype=float)
    n, m = alpha.shape
    lam = rates[:, -1].copy()
    u = lam * x
    row_terms = None
    if terms is None:
        order = np.argsort(-u, kind="stable")
    else:
        forced = np.broadcast_to(np.asarray(terms, dtype=np.int64), (n,))
        if np.any(forced < 0):
            raise ValueError("terms must be non-negative")
        order = np.argsort(-forced, kind="stable")
        row_terms = forced[order]
    alpha_s, rates_s, lam_s, u_s, x_s = alpha[order], rates[order], lam[order], u[order], x[order]
    p = rates_s / lam_s[:, None]
    q = 1.0 - p
    q[:, -1] = 0.0
    with np.errstate(divide="ignore"):
        log_u = np.log(u_s)

    acc, counts, vs, ws = _series(alpha_s, p, q, u_s, log_u, cfg, row_terms, with_grad)
    f = lam_s * acc
    ok = f > 0
    logf_s = np.full(n, LOG_PDF_SENTINEL)
    logf_s[ok] = np.log(f[ok])
    logf = np.empty(n)
    logf[order] = logf_s
    K = np.empty(n, dtype=np.int64)
    K[order] = counts
    if not with_grad:
        return logf, K

    def vjp(g):
        g = np.asarray(g, dtype=float).reshape(n)[order]
        fbar = np.zeros(n)
        fbar[ok] = g[ok] / f[ok]
        scale = fbar * lam_s
        if vs is not None:
            vbar, dp, du = _reverse_sweep(vs, ws, p, q, scale)
        else:
            vbar = np.empty((n, m))
            dp = np.empty((n, m))
            du = np.empty(n)
            lo = 0
            while lo < n:
                # counts are non-increasing, so the first row of a chunk needs the most
                step = max(1, _STORE_LIMIT // ((int(counts[lo]) + 1) * m))
                sl = slice(lo, lo + step)
                _, _, cvs, cws = _series(alpha_s[sl], p[sl], q[sl], u_s[sl], log_u[sl],
                                         cfg, counts[sl], True)
                if cvs is None:
                    raise MemoryError("uniformization series too long to differentiate")
                vbar[sl], dp[sl], du[sl] = _reverse_sweep(cvs, cws, p[sl], q[sl], scale[sl])
                lo += step
        d_rates = dp / lam_s[:, None]
        d_lam = fbar * acc + du * x_s - (dp * rates_s).sum(axis=1) / lam_s**2
        d_rates[:, -1] += d_lam
        d_alpha = np.empty((n, m))
        d_out = np.empty((n, m))
        d_alpha[order] = vbar
        d_out[order] = d_rates
        return d_alpha, d_out

    return logf, K, vjp


def ph_to_json(ph: PH) -> dict:
    if isinstance(ph, CanonicalPH):
        return {"alpha": ph.alpha.tolist(), "lambda": ph.rates.tolist()}
    return {"alpha": ph.alpha.tolist(), "A": ph.A.tolist()}


def ph_from_json(obj: dict) -> PH:
    if "lambda" in obj:
        return CanonicalPH(obj["alpha"], obj["lambda"])
    if "A" in obj:
        return GeneralPH(obj["alpha"], obj["A"])
    raise ValueError("PH JSON needs either 'lambda' or 'A'")
