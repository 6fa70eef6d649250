"""Synthetic heavy-tailed data with known ground truth, t-copula tables and CSV I/O.

Marginal families (parameters in data units)::

    weibull(k, lam)      F(x) = 1 - exp(-(x / lam)^k)
    pareto(alpha, xm)    F(x) = 1 - (xm / x)^alpha,  x >= xm
    lognormal(mu, sigma) F(x) = Phi((ln x - mu) / sigma)
    burr(c, k)           F(x) = 1 - (1 + x^c)^(-k)

Uniform draws are taken from the open interval (0, 1) so every inverse-CDF
map stays finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri, stdtr

from .jsonio import fmt_float

__all__ = [
    "FAMILIES",
    "MarginalSpec",
    "CopulaSpec",
    "Dataset",
    "CsvError",
    "true_cdf",
    "true_ccdf",
    "true_quantile",
    "true_isf",
    "open_uniform",
    "gen_marginal",
    "gen_t_copula",
    "benchmark_copula",
    "read_numeric_csv",
    "load_csv",
    "save_csv",
    "log1p_columns",
]

FAMILIES: dict[str, tuple[str, ...]] = {
    "weibull": ("k", "lam"),
    "pareto": ("alpha", "xm"),
    "lognormal": ("mu", "sigma"),
    "burr": ("c", "k"),
}


@dataclass(frozen=True)
class MarginalSpec:
    family: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {sorted(FAMILIES)}")
        names = FAMILIES[self.family]
        params = tuple(float(p) for p in self.params)
        if len(params) != len(names):
            raise ValueError(f"{self.family} takes {len(names)} parameters {names}")
        object.__setattr__(self, "params", params)
        for name, value in zip(names, params):
            if not math.isfinite(value):
                raise ValueError(f"parameter {name} must be finite")
            if name != "mu" and value <= 0:
                raise ValueError(f"parameter must be positive: {name}={value:g}")

    @classmethod
    def parse(cls, text: str) -> "MarginalSpec":
        """``"pareto:2.4,1.0"`` style shorthand."""
        family, _, rest = text.partition(":")
        try:
            params = tuple(float(p) for p in rest.split(",")) if rest else ()
        except ValueError:
            raise ValueError(f"cannot parse marginal spec {text!r}") from None
        return cls(family.strip().lower(), params)

    def __str__(self):
        return f"{self.family}:" + ",".join(format(p, "g") for p in self.params)

    def to_json(self) -> dict:
        return {"family": self.family, **dict(zip(FAMILIES[self.family], self.params))}


def true_cdf(spec: MarginalSpec, x):
    x = np.asarray(x, dtype=float)
    a, b = spec.params
    with np.errstate(divide="ignore", invalid="ignore"):
        if spec.family == "weibull":
            out = -np.expm1(-(np.maximum(x, 0.0) / b) ** a)
        elif spec.family == "pareto":
            out = np.where(x <= b, 0.0, -np.expm1(a * np.log(b / np.maximum(x, b))))
        elif spec.family == "lognormal":
            out = np.where(x <= 0, 0.0, ndtr((np.log(np.where(x > 0, x, 1.0)) - a) / b))
        else:
            out = -np.expm1(-b * np.log1p(np.maximum(x, 0.0) ** a))
    return out if out.ndim else float(out)


def true_ccdf(spec: MarginalSpec, x):
    """Survival function, accurate deep in the upper tail."""
    x = np.asarray(x, dtype=float)
    a, b = spec.params
    with np.errstate(divide="ignore", invalid="ignore"):
        if spec.family == "weibull":
            out = np.exp(-(np.maximum(x, 0.0) / b) ** a)
        elif spec.family == "pareto":
            out = np.where(x <= b, 1.0, (b / np.maximum(x, b)) ** a)
        elif spec.family == "lognormal":
            out = np.where(x <= 0, 1.0, ndtr(-(np.log(np.where(x > 0, x, 1.0)) - a) / b))
        else:
            out = np.exp(-b * np.log1p(np.maximum(x, 0.0) ** a))
    return out if out.ndim else float(out)


def _check_prob(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if np.any(~(q > 0)) or np.any(~(q < 1)):
        raise ValueError("probability level must lie in (0, 1)")
    return q


def true_quantile(spec: MarginalSpec, q):
    q = _check_prob(q)
    a, b = spec.params
    if spec.family == "weibull":
        out = b * (-np.log1p(-q)) ** (1.0 / a)
    elif spec.family == "pareto":
        out = b * np.exp(-np.log1p(-q) / a)
    elif spec.family == "lognormal":
        out = np.exp(a + b * ndtri(q))
    else:
        out = np.expm1(-np.log1p(-q) / b) ** (1.0 / a)
    return out if out.ndim else float(out)


def true_isf(spec: MarginalSpec, p):
    """Inverse survival: the ``x`` with ``P(X > x) = p``."""
    p = _check_prob(p)
    a, b = spec.params
    if spec.family == "weibull":
        out = b * (-np.log(p)) ** (1.0 / a)
    elif spec.family == "pareto":
        out = b * p ** (-1.0 / a)
    elif spec.family == "lognormal":
        out = np.exp(a - b * ndtri(p))
    else:
        out = np.expm1(-np.log(p) / b) ** (1.0 / a)
    return out if out.ndim else float(out)


def open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    """Uniforms on a 2^-53 grid offset by half a step, so never 0 or 1."""
    return (rng.integers(0, 2**53, size=size, dtype=np.int64) + 0.5) / 2.0**53


def _from_uniform(spec: MarginalSpec, u: np.ndarray) -> np.ndarray:
    a, b = spec.params
    if spec.family == "weibull":
        return b * (-np.log(u)) ** (1.0 / a)
    if spec.family == "pareto":
        return b * u ** (-1.0 / a)
    if spec.family == "lognormal":
        return np.exp(a + b * ndtri(u))
    return ((1.0 - u) ** (-1.0 / b) - 1.0) ** (1.0 / a)


@dataclass
class Dataset:
    """``n x D`` table of non-negative observations with column names."""

    values: np.ndarray
    columns: list[str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError("dataset needs at least one row")
        if len(self.columns) != values.shape[1]:
            raise ValueError(f"{len(self.columns)} column names for {values.shape[1]} columns")
        bad = np.argwhere(~np.isfinite(values) | (values < 0))
        if bad.size:
            r, c = bad[0]
            raise ValueError(f"row {r}, column {self.columns[c]!r}: value must be finite and >= 0")
        self.values = values
        self.columns = list(self.columns)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]


def gen_marginal(spec: MarginalSpec, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x = _from_uniform(spec, open_uniform(rng, n))
    return Dataset(x[:, None], ["x0"],
                   {"generator": "marginal", "marginal": spec.to_json(), "n": n, "seed": seed})


@dataclass(frozen=True)
class CopulaSpec:
    """Student-t copula with per-dimension marginals.

    Dimensions that are not linked through nonzero correlations get separate
    chi-square mixing variables, so zero correlation between such groups means
    genuine independence rather than the tail dependence a shared mixing
    variable would induce.  Every ``independent_pairs`` entry must straddle
    two such groups.
    """

    corr: np.ndarray
    nu: float
    marginals: tuple[MarginalSpec, ...]
    independent_pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        corr = np.array(self.corr, dtype=float)
        D = len(self.marginals)
        if corr.shape != (D, D):
            raise ValueError(f"correlation matrix must be {D}x{D}")
        if not np.allclose(corr, corr.T, atol=1e-12, rtol=0) or not np.allclose(np.diag(corr), 1.0):
            raise ValueError("correlation matrix must be symmetric with unit diagonal")
        try:
            np.linalg.cholesky(corr)
        except np.linalg.LinAlgError:
            raise ValueError("correlation matrix is not positive definite") from None
        if not self.nu > 0:
            raise ValueError("parameter must be positive: nu")
        pairs = tuple((int(i), int(j)) for i, j in self.independent_pairs)
        object.__setattr__(self, "corr", corr)
        object.__setattr__(self, "marginals", tuple(self.marginals))
        object.__setattr__(self, "independent_pairs", pairs)
        groups = self.groups()
        label = {j: g for g, members in enumerate(groups) for j in members}
        for i, j in pairs:
            if not (0 <= i < D and 0 <= j < D) or i == j:
                raise ValueError(f"independent pair ({i}, {j}) out of range")
            if corr[i, j] != 0:
                raise ValueError(f"independent pair ({i}, {j}) has nonzero correlation")
            if label[i] == label[j]:
                raise ValueError(f"independent pair ({i}, {j}) is linked through other dimensions")

    @property
    def dims(self) -> int:
        return len(self.marginals)

    def groups(self) -> list[list[int]]:
        """Connected components of the nonzero-correlation graph, in index order."""
        D = self.dims
        seen = [False] * D
        out = []
        for start in range(D):
            if seen[start]:
                continue
            stack, members = [start], []
            seen[start] = True
            while stack:
                i = stack.pop()
                members.append(i)
                for j in np.flatnonzero(self.corr[i] != 0):
                    if not seen[j]:
                        seen[j] = True
                        stack.append(int(j))
            out.append(sorted(members))
        return out

    def to_json(self) -> dict:
        return {"corr": self.corr.tolist(), "nu": self.nu,
                "marginals": [m.to_json() for m in self.marginals],
                "independent_pairs": [list(p) for p in self.independent_pairs]}


def benchmark_copula() -> CopulaSpec:
    """Declared 5D benchmark: dims 0 and 1 independent of everything, 2-4 correlated."""
    corr = np.eye(5)
    for (i, j), r in {(2, 3): 0.7, (2, 4): -0.6, (3, 4): -0.5}.items():
        corr[i, j] = corr[j, i] = r
    marginals = (
        MarginalSpec("pareto", (2.4, 1.0)),
        MarginalSpec("weibull", (0.8, 1.0)),
        MarginalSpec("lognormal", (0.0, 0.75)),
        MarginalSpec("burr", (2.0, 1.5)),
        MarginalSpec("weibull", (1.5, 1.0)),
    )
    return CopulaSpec(corr, 4.0, marginals, ((0, 1),))


def gen_t_copula(spec: CopulaSpec, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    D = spec.dims
    L = np.linalg.cholesky(spec.corr)
    z = ndtri(open_uniform(rng, (n, D))) @ L.T
    t = np.empty_like(z)
    for members in spec.groups():
        if math.isinf(spec.nu):
            w = np.ones(n)
        else:
            w = rng.chisquare(spec.nu, n) / spec.nu
        t[:, members] = z[:, members] / np.sqrt(w)[:, None]
    values = np.empty_like(t)
    for j, marginal in enumerate(spec.marginals):
        tj = t[:, j]
        lower = stdtr(spec.nu, tj)
        upper = stdtr(spec.nu, -tj)
        # map each half through the side whose probability is small, so no level rounds to 1
        neg = tj < 0
        col = np.empty(n)
        lo = np.maximum(lower[neg], 1e-300)
        hi = np.maximum(upper[~neg], 1e-300)
        col[neg] = true_quantile(marginal, lo)
        col[~neg] = true_isf(marginal, hi)
        values[:, j] = col
    return Dataset(values, [f"x{j}" for j in range(D)],
                   {"generator": "t-copula", "copula": spec.to_json(), "n": n, "seed": seed})


class CsvError(ValueError):
    pass


def read_numeric_csv(path: str | Path, allow_negative: bool = False) -> tuple[list[str], np.ndarray]:
    """Header and ``n x D`` array of a numeric CSV; a header-only file gives ``n = 0``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].strip():
        raise CsvError(f"{path}: missing header row")
    header = [h.strip() for h in lines[0].split(",")]
    if any(not h for h in header):
        raise CsvError(f"{path}: empty column name in header")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise CsvError(f"{path}: line {lineno} has {len(cells)} cells, expected {len(header)}")
        row = []
        for name, cell in zip(header, cells):
            try:
                v = float(cell)
            except ValueError:
                raise CsvError(f"{path}: line {lineno}, column {name!r}: "
                               f"not a number: {cell.strip()!r}") from None
            if not math.isfinite(v) or (v < 0 and not allow_negative):
                raise CsvError(f"{path}: line {lineno}, column {name!r}: value must be finite"
                               f"{'' if allow_negative else ' and >= 0'}, got {cell.strip()}")
            row.append(v)
        rows.append(row)
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def load_csv(path: str | Path) -> Dataset:
    """Read a numeric CSV with a header row; cells must be finite and non-negative."""
    header, values = read_numeric_csv(path)
    if values.shape[0] == 0:
        raise CsvError(f"{path}: no data rows")
    return Dataset(values, header, {"source": str(path)})


def dataset_csv(dataset: Dataset) -> str:
    lines = [",".join(dataset.columns)]
    lines += [",".join(fmt_float(v) for v in row) for row in dataset.values]
    return "\n".join(lines) + "\n"


def save_csv(dataset: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dataset_csv(dataset), encoding="utf-8", newline="\n")
    return path


def log1p_columns(dataset: Dataset | np.ndarray) -> np.ndarray:
    values = dataset.values if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)
    if np.any(values < 0):
        raise ValueError("log1p_columns expects non-negative entries")
    return np.log1p(values)
