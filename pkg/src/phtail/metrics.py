"""Tail and dependence metrics for comparing generated samples with a reference.

The reference is either an analytic marginal (:class:`~phtail.data.MarginalSpec`)
or a table of reference samples.  Empirical quantiles use linear interpolation
between order statistics (numpy's default, "type 7").
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Sequence, Union

import numpy as np

from .data import MarginalSpec, true_ccdf, true_quantile

__all__ = [
    "Truth",
    "MetricsReport",
    "ks_tail",
    "q_rel_error",
    "corr_err",
    "kendall_tau_b",
    "tau_matrix",
    "tau_err",
    "coexceedance",
    "coex_err",
    "empirical_ccdf",
    "evaluate",
    "aggregate",
]

Truth = Union[MarginalSpec, np.ndarray, Sequence[float]]


def _samples(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def _threshold(truth: Truth, q: float) -> float:
    if isinstance(truth, MarginalSpec):
        return float(true_quantile(truth, q))
    return float(np.quantile(_samples(truth, "reference samples"), q))


def ks_tail(gen, truth: Truth, q: float = 0.95) -> float | None:
    """Sup distance between tail CDFs conditioned on ``x >= x_q``.

    ``x_q`` is the true ``q``-quantile (analytic, or the empirical quantile of
    the reference samples).  Each side is renormalized by its own tail mass.
    Returns ``None`` when no generated sample reaches ``x_q``.
    """
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    gen = _samples(gen, "generated samples")
    x_q = _threshold(truth, q)
    g = np.sort(gen[gen >= x_q])
    if g.size == 0:
        return None
    n = g.size
    if isinstance(truth, MarginalSpec):
        # conditional true CDF 1 - S(x)/S(x_q), checked on both sides of every jump
        s_q = float(true_ccdf(truth, x_q))
        f = 1.0 - np.asarray(true_ccdf(truth, g)) / s_q
        upper = np.arange(1, n + 1) / n - f
        lower = f - np.arange(0, n) / n
        return float(min(1.0, max(upper.max(), lower.max(), 0.0)))
    ref = _samples(truth, "reference samples")
    r = np.sort(ref[ref >= x_q])
    grid = np.union1d(g, r)
    fg = np.searchsorted(g, grid, side="right") / n
    fr = np.searchsorted(r, grid, side="right") / r.size
    return float(np.max(np.abs(fg - fr)))


def q_rel_error(gen, truth: Truth | float, level: float = 0.99) -> float:
    """``|Q_gen - Q_true| / Q_true`` at the given level."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    gen = _samples(gen, "generated samples")
    if isinstance(truth, (int, float)):
        q_true = float(truth)
    else:
        q_true = _threshold(truth, level)
    if q_true == 0:
        raise ValueError("true quantile is zero; relative error undefined")
    return abs(float(np.quantile(gen, level)) - q_true) / abs(q_true)


def _table(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty n x D table")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def _pair(real, gen, min_dims: int = 1, min_rows: int = 1):
    real, gen = _table(real, "real data"), _table(gen, "generated data")
    if real.shape[1] != gen.shape[1]:
        raise ValueError(f"dimension mismatch: real has {real.shape[1]} columns, "
                         f"generated has {gen.shape[1]}")
    if real.shape[1] < min_dims:
        raise ValueError(f"need at least {min_dims} dimensions, got {real.shape[1]}")
    if min(real.shape[0], gen.shape[0]) < min_rows:
        raise ValueError(f"need at least {min_rows} rows per table")
    return real, gen


def _log_corr(x: np.ndarray, name: str) -> np.ndarray:
    if np.any(x < 0):
        raise ValueError(f"{name} has negative entries; log1p correlation needs x >= 0")
    y = np.log1p(x)
    for j in range(y.shape[1]):
        if np.ptp(y[:, j]) == 0:
            raise ValueError(f"{name} column {j} has zero variance")
    return np.corrcoef(y, rowvar=False).reshape(y.shape[1], y.shape[1])


def corr_err(real, gen) -> float:
    """Frobenius distance between Pearson correlation matrices of log1p tables."""
    real, gen = _pair(real, gen, min_rows=2)
    return float(np.linalg.norm(_log_corr(gen, "generated data") - _log_corr(real, "real data")))


def _dense_rank(v: np.ndarray) -> np.ndarray:
    return np.unique(v, return_inverse=True)[1].astype(np.int64)


def _tie_pairs(v: np.ndarray) -> int:
    _, counts = np.unique(v, return_counts=True, axis=0)
    counts = counts.astype(np.int64)
    return int((counts * (counts - 1) // 2).sum())


def _count_inversions(a: np.ndarray) -> int:
    """Pairs ``i < j`` with ``a[i] > a[j]`` for non-negative integers ``a < len(a)``.

    Bottom-up merge sort: at width ``w`` every block of ``w`` entries is
    sorted, and each element of a right block counts the larger elements of
    its left partner with one global binary search.
    """
    a = np.array(a, dtype=np.int64)
    n = a.size
    span = n + 1
    idx = np.arange(n)
    inv = 0
    w = 1
    while w < n:
        block = idx // (2 * w)
        left = (idx % (2 * w)) < w
        keys = block[left] * span + a[left]
        rb = block[~left]
        ra = a[~left]
        hi = np.searchsorted(keys, rb * span + n, side="right")
        lo = np.searchsorted(keys, rb * span + ra, side="right")
        inv += int((hi - lo).sum())
        offset = block * span
        a = np.sort(offset + a) - offset
        w *= 2
    return inv


def kendall_tau_b(x, y) -> float:
    """Tie-adjusted Kendall tau in O(n log n); NaN when either input is constant."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.size != y.size:
        raise ValueError("x and y must have equal length")
    n = x.size
    if n < 2:
        raise ValueError("need at least two observations")
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(xs)
    n2 = _tie_pairs(ys)
    n3 = _tie_pairs(np.stack([xs, ys], axis=1))
    disc = _count_inversions(_dense_rank(ys))
    denom = math.sqrt(float(n0 - n1) * float(n0 - n2))
    if denom == 0:
        return math.nan
    return (n0 - n1 - n2 + n3 - 2 * disc) / denom


def tau_matrix(x) -> np.ndarray:
    x = _table(x, "table")
    D = x.shape[1]
    out = np.eye(D)
    for i, j in combinations(range(D), 2):
        out[i, j] = out[j, i] = kendall_tau_b(x[:, i], x[:, j])
    return out


def _pairwise_mean_abs(a: np.ndarray, b: np.ndarray) -> float:
    iu = np.triu_indices(a.shape[0], k=1)
    return float(np.mean(np.abs(a[iu] - b[iu])))


def tau_err(real, gen) -> float:
    """Mean absolute Kendall-tau difference over all unordered dimension pairs."""
    real, gen = _pair(real, gen, min_dims=2, min_rows=2)
    return _pairwise_mean_abs(tau_matrix(real), tau_matrix(gen))


def coexceedance(x, thresholds) -> np.ndarray:
    """Matrix of ``P(x_i > Q_i and x_j > Q_j)`` estimated from the rows of ``x``."""
    x = _table(x, "table")
    e = (x > np.asarray(thresholds, dtype=float)[None, :]).astype(float)
    return (e.T @ e) / x.shape[0]


def coex_err(real, gen, q: float = 0.99, thresholds: str = "real") -> float:
    """Mean absolute pairwise difference of tail co-exceedance probabilities.

    ``thresholds="real"`` applies the real-data marginal ``q``-quantiles to
    both tables; ``"own"`` lets each table use its own marginal quantiles.
    """
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    if thresholds not in ("real", "own"):
        raise ValueError("thresholds must be 'real' or 'own'")
    real, gen = _pair(real, gen, min_dims=2)
    q_real = np.quantile(real, q, axis=0)
    q_gen = q_real if thresholds == "real" else np.quantile(gen, q, axis=0)
    return _pairwise_mean_abs(coexceedance(real, q_real), coexceedance(gen, q_gen))


def empirical_ccdf(samples) -> tuple[np.ndarray, np.ndarray]:
    """Unique sorted values and the fraction of samples strictly above each."""
    s = np.sort(_samples(samples, "samples"))
    xs = np.unique(s)
    surv = (s.size - np.searchsorted(s, xs, side="right")) / s.size
    return xs, surv


@dataclass
class MetricsReport:
    """Per-dimension tail metrics plus table-level dependence metrics.

    Dependence fields are ``None`` for one-dimensional tables; ``ks_tail``
    entries are ``None`` where no generated sample reaches the threshold.
    """

    ks_tail: list[float | None]
    q99_rel_err: list[float]
    corr_err: float | None = None
    tau_err: float | None = None
    coex_err: dict[str, float] = field(default_factory=dict)
    n_real: int = 0
    n_gen: int = 0
    seeds: list[int] = field(default_factory=list)
    final_nll: float | None = None
    timings: dict[str, float] = field(default_factory=dict)

    def to_json(self, timing: bool = False) -> dict:
        out = asdict(self)
        if not timing:
            out.pop("timings")
        return out

    def rows(self) -> list[tuple[str, str]]:
        def f(v):
            return "N/A" if v is None else f"{v:.6f}"

        rows = [(f"ks_tail[{j}]", f(v)) for j, v in enumerate(self.ks_tail)]
        rows += [(f"q99_rel_err[{j}]", f(v)) for j, v in enumerate(self.q99_rel_err)]
        rows += [("corr_err", f(self.corr_err)), ("tau_err", f(self.tau_err))]
        rows += [(f"coex_err[q={k}]", f(v)) for k, v in self.coex_err.items()]
        if self.final_nll is not None:
            rows.append(("final_nll", f(self.final_nll)))
        return rows

    def table(self) -> str:
        rows = self.rows()
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def evaluate(gen, real=None, truth: Sequence[MarginalSpec] | None = None,
             ks_q: float = 0.95, q_level: float = 0.99, coex_levels: Sequence[float] = (0.95, 0.99),
             thresholds: str = "real") -> MetricsReport:
    """Full metric set; tail metrics use ``truth`` when given, else ``real``."""
    gen = _table(gen, "generated data")
    D = gen.shape[1]
    if truth is not None and len(truth) != D:
        raise ValueError(f"{len(truth)} analytic marginals for {D} generated columns")
    if real is not None:
        real, gen = _pair(real, gen)
    if truth is None and real is None:
        raise ValueError("need either real data or analytic marginals")
    refs = list(truth) if truth is not None else [real[:, j] for j in range(D)]
    report = MetricsReport(
        ks_tail=[ks_tail(gen[:, j], refs[j], ks_q) for j in range(D)],
        q99_rel_err=[q_rel_error(gen[:, j], refs[j], q_level) for j in range(D)],
        n_real=0 if real is None else real.shape[0],
        n_gen=gen.shape[0],
    )
    if real is not None and D >= 2:
        report.corr_err = corr_err(real, gen)
        report.tau_err = tau_err(real, gen)
        report.coex_err = {format(q, "g"): coex_err(real, gen, q, thresholds) for q in coex_levels}
    return report


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    """Mean and sample standard deviation of every scalar metric across runs."""
    if not reports:
        raise ValueError("no reports to aggregate")
    series: dict[str, list[float]] = {}

    def add(key, v):
        if v is not None:
            series.setdefault(key, []).append(float(v))

    for r in reports:
        for j, v in enumerate(r.ks_tail):
            add(f"ks_tail[{j}]", v)
        for j, v in enumerate(r.q99_rel_err):
            add(f"q99_rel_err[{j}]", v)
        add("corr_err", r.corr_err)
        add("tau_err", r.tau_err)
        for k, v in r.coex_err.items():
            add(f"coex_err[q={k}]", v)
        add("final_nll", r.final_nll)
    out = {}
    for key, vals in series.items():
        arr = np.array(vals)
        out[key] = {"mean": float(arr.mean()),
                    "sd": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
                    "runs": int(arr.size)}
    return out
