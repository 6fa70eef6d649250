import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from phtail.data import MarginalSpec, gen_marginal, true_quantile
from phtail.metrics import (MetricsReport, _count_inversions, aggregate, coex_err, coexceedance,
                            corr_err, empirical_ccdf, evaluate, kendall_tau_b, ks_tail,
                            q_rel_error, tau_err, tau_matrix)


def brute_tau_b(x, y):
    conc = disc = tx = ty = 0
    for i, j in combinations(range(len(x)), 2):
        dx, dy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
        if dx == 0 and dy == 0:
            continue
        if dx == 0:
            tx += 1
        elif dy == 0:
            ty += 1
        elif dx == dy:
            conc += 1
        else:
            disc += 1
    return (conc - disc) / math.sqrt((conc + disc + tx) * (conc + disc + ty))


def brute_inversions(a):
    return sum(1 for i, j in combinations(range(len(a)), 2) if a[i] > a[j])


def brute_coex(x, q):
    D = x.shape[1]
    out = np.zeros((D, D))
    for i in range(D):
        for j in range(D):
            out[i, j] = np.mean((x[:, i] > q[i]) & (x[:, j] > q[j]))
    return out


# -- Kendall tau -----------------------------------------------------------------

def test_tau_small_example():
    assert kendall_tau_b([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(2 / 3, abs=1e-12)
    assert kendall_tau_b([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=2, max_size=40))
def test_tau_matches_brute_force_with_ties(pairs):
    x = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs], dtype=float)
    got = kendall_tau_b(x, y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        assert math.isnan(got)
    else:
        assert got == pytest.approx(brute_tau_b(x, y), abs=1e-12)


def test_tau_matches_scipy_large():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(5000)
    y = np.round(x + rng.standard_normal(5000), 1)
    assert kendall_tau_b(x, y) == pytest.approx(stats.kendalltau(x, y).statistic, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=0, max_size=30))
def test_inversion_count(vals):
    n = len(vals)
    a = [v % max(n, 1) for v in vals]
    assert _count_inversions(np.array(a, dtype=np.int64)) == brute_inversions(a)


def test_tau_validation():
    with pytest.raises(ValueError):
        kendall_tau_b([1.0], [1.0])
    with pytest.raises(ValueError):
        kendall_tau_b([1.0, 2.0], [1.0])


def test_tau_matrix_and_err():
    rng = np.random.default_rng(1)
    x = rng.exponential(size=(200, 3))
    m = tau_matrix(x)
    np.testing.assert_array_equal(np.diag(m), 1.0)
    np.testing.assert_allclose(m, m.T)
    assert tau_err(x, x) == 0.0
    y = x.copy()
    y[:, 2] = x[:, 0]
    expected = np.mean([0.0, abs(m[0, 2] - 1.0), abs(m[1, 2] - kendall_tau_b(x[:, 1], x[:, 0]))])
    assert tau_err(x, y) == pytest.approx(expected, abs=1e-12)


# -- co-exceedance ---------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_coexceedance_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    x = rng.exponential(size=(60, 3))
    q = np.quantile(x, 0.8, axis=0)
    np.testing.assert_allclose(coexceedance(x, q), brute_coex(x, q), atol=1e-12)


def test_coex_err_oracle():
    rng = np.random.default_rng(2)
    real = rng.exponential(size=(500, 3))
    gen = rng.exponential(size=(400, 3))
    q = np.quantile(real, 0.95, axis=0)
    a, b = brute_coex(real, q), brute_coex(gen, q)
    iu = np.triu_indices(3, 1)
    assert coex_err(real, gen, 0.95) == pytest.approx(np.mean(np.abs(a - b)[iu]), abs=1e-12)
    qg = np.quantile(gen, 0.95, axis=0)
    own = np.mean(np.abs(a - brute_coex(gen, qg))[iu])
    assert coex_err(real, gen, 0.95, thresholds="own") == pytest.approx(own, abs=1e-12)


def test_coex_comonotone_vs_independent():
    rng = np.random.default_rng(3)
    u = rng.uniform(size=100_000)
    comonotone = np.stack([u, u], axis=1)
    indep = rng.uniform(size=(100_000, 2))
    q = np.quantile(comonotone, 0.99, axis=0)
    assert coexceedance(comonotone, q)[0, 1] == pytest.approx(0.01, abs=1e-4)
    assert coexceedance(indep, np.quantile(indep, 0.99, axis=0))[0, 1] == pytest.approx(1e-4, abs=1e-4)
    assert coex_err(comonotone, indep, 0.99) == pytest.approx(0.0099, abs=2e-4)


def test_coex_validation():
    x = np.ones((10, 2))
    with pytest.raises(ValueError):
        coex_err(x, x, 1.0)
    with pytest.raises(ValueError):
        coex_err(x, x, 0.9, thresholds="mine")
    with pytest.raises(ValueError):
        coex_err(np.ones((10, 1)), np.ones((10, 1)))
    with pytest.raises(ValueError, match="dimension mismatch"):
        coex_err(x, np.ones((10, 3)))


# -- correlation ------------------------------------------------------------------------------

def test_corr_err_oracle():
    rng = np.random.default_rng(4)
    real = rng.exponential(size=(300, 3))
    gen = rng.exponential(size=(200, 3))
    expected = np.linalg.norm(np.corrcoef(np.log1p(gen).T) - np.corrcoef(np.log1p(real).T))
    assert corr_err(real, gen) == pytest.approx(expected, abs=1e-12)
    assert corr_err(real, real) == 0.0


def test_corr_err_names_constant_column():
    real = np.random.default_rng(5).exponential(size=(50, 2))
    gen = real.copy()
    gen[:, 1] = 1.0
    with pytest.raises(ValueError, match="column 1 has zero variance"):
        corr_err(real, gen)


# -- tail KS and quantiles ------------------------------------------------------------------------

def test_ks_tail_exact_one_sample():
    spec = MarginalSpec("weibull", (1.0, 1.0))
    x_q = true_quantile(spec, 0.5)
    # conditional law above the median of Exp(1) is x_q + Exp(1)
    gen = x_q + np.array([0.1, 0.5, 2.0])
    f = 1 - np.exp(-np.array([0.1, 0.5, 2.0]))
    expected = max(np.max(np.arange(1, 4) / 3 - f), np.max(f - np.arange(3) / 3))
    assert ks_tail(gen, spec, 0.5) == pytest.approx(expected, abs=1e-12)


def test_ks_tail_against_scipy_on_exceedances():
    spec = MarginalSpec("pareto", (2.4, 1.0))
    x = gen_marginal(spec, 50_000, 0).values[:, 0]
    x_q = true_quantile(spec, 0.95)
    tail = x[x >= x_q]
    # Pareto tails are Pareto with scale x_q
    ref = stats.kstest(tail, stats.pareto(2.4, scale=x_q).cdf).statistic
    assert ks_tail(x, spec, 0.95) == pytest.approx(ref, abs=1e-12)
    assert ref < 0.05


def test_ks_tail_two_sample():
    rng = np.random.default_rng(6)
    ref = rng.exponential(size=20_000)
    gen = rng.exponential(size=20_000)
    x_q = np.quantile(ref, 0.9)
    expected = stats.ks_2samp(gen[gen >= x_q], ref[ref >= x_q]).statistic
    assert ks_tail(gen, ref, 0.9) == pytest.approx(expected, abs=1e-12)


def test_ks_tail_none_without_exceedances():
    spec = MarginalSpec("weibull", (1.0, 1.0))
    assert ks_tail(np.full(10, 0.01), spec, 0.95) is None
    with pytest.raises(ValueError):
        ks_tail([1.0], spec, 1.0)


def test_q_rel_error():
    spec = MarginalSpec("weibull", (1.0, 1.0))
    gen = np.linspace(0, 10, 1001)
    q_true = -math.log(0.01)
    assert q_rel_error(gen, spec, 0.99) == pytest.approx(abs(9.9 - q_true) / q_true, rel=1e-12)
    assert q_rel_error(gen, 5.0, 0.5) == 0.0
    with pytest.raises(ValueError):
        q_rel_error(gen, 0.0, 0.5)


def test_empirical_ccdf():
    xs, s = empirical_ccdf([3.0, 1.0, 1.0, 2.0])
    np.testing.assert_array_equal(xs, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(s, [0.5, 0.25, 0.0])


# -- reports -----------------------------------------------------------------------------------

def test_evaluate_full_report_and_table():
    rng = np.random.default_rng(7)
    real = rng.exponential(size=(2000, 2))
    gen = rng.exponential(size=(2000, 2))
    rep = evaluate(gen, real)
    assert len(rep.ks_tail) == 2 and len(rep.q99_rel_err) == 2
    assert set(rep.coex_err) == {"0.95", "0.99"}
    assert rep.tau_err is not None and rep.corr_err is not None
    assert rep.n_real == rep.n_gen == 2000
    assert "timings" not in rep.to_json()
    assert "timings" in rep.to_json(timing=True)
    assert "coex_err[q=0.99]" in rep.table()


def test_evaluate_univariate_with_truth():
    spec = MarginalSpec("weibull", (0.8, 1.0))
    gen = gen_marginal(spec, 5000, 1).values
    rep = evaluate(gen, truth=[spec])
    assert rep.tau_err is None and rep.coex_err == {}
    assert "N/A" in rep.table()
    with pytest.raises(ValueError):
        evaluate(gen)
    with pytest.raises(ValueError):
        evaluate(gen, truth=[spec, spec])


def test_aggregate():
    reps = [MetricsReport([0.1, None], [0.2, 0.3], tau_err=t) for t in (0.1, 0.3)]
    out = aggregate(reps)
    assert out["tau_err"]["mean"] == pytest.approx(0.2)
    assert out["tau_err"]["sd"] == pytest.approx(math.sqrt(0.02))
    assert "ks_tail[1]" not in out
    assert out["ks_tail[0]"]["runs"] == 2
    with pytest.raises(ValueError):
        aggregate([])
