import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from psychoforge import psychometrics as ps
from psychoforge.psychometrics import CorrelationMatrix, StatsError


# -- pearson ------------------------------------------------------------------------

def test_pearson_examples():
    x = [1.0, 2.0, 3.0, 4.0]
    assert ps.pearson(x, x) == pytest.approx(1.0)
    assert ps.pearson(x, [-v + 7 for v in x]) == pytest.approx(-1.0)
    # cov = 1.0, var = 1.25 each (population)
    assert ps.pearson(x, [2, 1, 4, 3]) == pytest.approx(0.6)


def test_pearson_errors():
    with pytest.raises(StatsError, match="constant"):
        ps.pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(StatsError):
        ps.pearson([1, 2], [1, 2])
    with pytest.raises(StatsError):
        ps.pearson([1, 2, 3], [1, 2, 3, 4])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50), st.floats(-100, 100))
def test_pearson_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=20), rng.normal(size=20)
    r = ps.pearson(x, y)
    assert ps.pearson(a * x + b, y) == pytest.approx(r, abs=1e-9)
    assert ps.pearson(-a * x + b, y) == pytest.approx(-r, abs=1e-9)
    assert r == pytest.approx(stats.pearsonr(x, y)[0], abs=1e-12)


def test_convergent_table():
    rng = np.random.default_rng(0)
    inputs = {f"a{k}": dict(zip("OCEAN", rng.normal(size=5))) for k in range(30)}
    t = ps.convergent_table(inputs, inputs)
    assert all(v == pytest.approx(1.0) for v in t.correlations.values())
    assert t.average == pytest.approx(1.0)
    with pytest.raises(StatsError, match="agent sets"):
        ps.convergent_table(inputs, {k: v for k, v in list(inputs.items())[:-1]})


def test_correlation_matrix_invariants():
    with pytest.raises(StatsError):
        CorrelationMatrix(("a", "b"), [[1, 0.5], [0.4, 1]])
    with pytest.raises(StatsError):
        CorrelationMatrix(("a", "b"), [[1, 1.5], [1.5, 1]])
    with pytest.raises(StatsError, match="constant"):
        CorrelationMatrix.from_data(np.ones((5, 2)), ["a", "b"])


# -- alpha ---------------------------------------------------------------------------

def alpha_bruteforce(x):
    x = [list(map(float, row)) for row in x]
    n, k = len(x), len(x[0])

    def var(v):
        m = sum(v) / len(v)
        return sum((a - m) ** 2 for a in v) / (len(v) - 1)

    item_vars = sum(var([row[j] for row in x]) for j in range(k))
    total = var([sum(row) for row in x])
    return k / (k - 1) * (1 - item_vars / total)


def test_alpha_identical_columns():
    col = np.arange(10, dtype=float)[:, None]
    assert ps.cronbach_alpha(np.repeat(col, 4, axis=1)).alpha == pytest.approx(1.0, abs=1e-12)


def test_alpha_independent_columns():
    x = np.random.default_rng(1).normal(size=(5000, 2))
    assert abs(ps.cronbach_alpha(x).alpha) < 0.1


def test_alpha_reverse_keying():
    rng = np.random.default_rng(2)
    base = rng.integers(1, 10, size=(100, 1))
    x = np.hstack([base, 10 - base, base])
    assert ps.cronbach_alpha(x, [False, True, False], (1, 9)).alpha == pytest.approx(1.0)


def test_alpha_errors():
    with pytest.raises(StatsError):
        ps.cronbach_alpha(np.ones((10, 1)))
    with pytest.raises(StatsError, match="zero variance"):
        ps.cronbach_alpha(np.ones((10, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_alpha_at_most_one(seed):
    x = np.random.default_rng(seed).integers(1, 10, size=(30, 5))
    if np.var(x.sum(1)) > 0:
        assert ps.cronbach_alpha(x).alpha <= 1 + 1e-12


# -- CFA -------------------------------------------------------------------------------

def equicorrelated(p, rho):
    R = np.full((p, p), rho)
    np.fill_diagonal(R, 1.0)
    return CorrelationMatrix(tuple(f"i{k}" for k in range(p)), R)


def test_cfa_equicorrelated():
    fit = ps.fit_one_factor_cfa(equicorrelated(4, 0.49))
    assert fit.converged
    assert all(v == pytest.approx(0.7, abs=0.01) for v in fit.loadings.values())


def test_cfa_standardized_solution():
    fit = ps.fit_one_factor_cfa(equicorrelated(6, 0.3))
    for k in fit.items:
        assert fit.loadings[k] ** 2 + fit.uniquenesses[k] == pytest.approx(1.0, abs=1e-6)
        assert fit.uniquenesses[k] >= ps.PSI_FLOOR


def test_cfa_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    R = equicorrelated(5, 0.4).values
    for _ in range(10):
        theta = np.concatenate([rng.uniform(0.2, 0.9, 5), rng.uniform(0.2, 0.9, 5)])
        g = ps.ml_gradient(theta, R)
        h = 1e-6
        fd = np.array([
            (ps.ml_discrepancy(theta + h * e, R) - ps.ml_discrepancy(theta - h * e, R)) / (2 * h)
            for e in np.eye(10)
        ])
        assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)) < 1e-5


def test_cfa_matches_statsmodels_ml_factor():
    sm_factor = pytest.importorskip("statsmodels.multivariate.factor")
    rng = np.random.default_rng(4)
    lam = np.array([0.5, 0.6, 0.7, 0.8, 0.4])
    f = rng.normal(size=(3000, 1))
    x = f * lam + rng.normal(size=(3000, 5)) * np.sqrt(1 - lam**2)
    R = CorrelationMatrix.from_data(x, list("abcde"))
    ours = np.array([ps.fit_one_factor_cfa(R).loadings[k] for k in "abcde"])
    ref = sm_factor.Factor(corr=R.values, n_factor=1, method="ml", nobs=3000).fit().loadings[:, 0]
    ref = ref * np.sign(ref.sum())
    assert np.allclose(ours, ref, atol=1e-4)


def test_cfa_heywood_flag():
    # just-identified: lambda_a^2 = r_ab * r_ac / r_bc = 1.2 > 1
    R = np.array([[1.0, 0.8, 0.6], [0.8, 1.0, 0.4], [0.6, 0.4, 1.0]])
    fit = ps.fit_one_factor_cfa(CorrelationMatrix(("a", "b", "c"), R))
    assert fit.heywood_flags == ["a"]
    assert all(fit.uniquenesses[k] >= 0 for k in fit.items)


def test_cfa_duplicate_pair_diagnosed():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(300, 1)) + rng.normal(size=(300, 5))
    x = np.hstack([x, x[:, [2]]])
    labels = ["Fretful", "Moody", "Envious", "Touchy", "Relaxed", "Jealous"]
    fit = ps.fit_one_factor_cfa(CorrelationMatrix.from_data(x, labels))
    assert not fit.converged
    assert "Envious" in fit.diagnosis and "Jealous" in fit.diagnosis
    assert fit.collinear_pair == ("Envious", "Jealous")


@pytest.mark.parametrize("drop, gone", [("first", "Envious"), ("last", "Jealous")])
def test_fit_domain_drops_and_refits(drop, gone):
    rng = np.random.default_rng(6)
    f = rng.normal(size=(400, 1))
    x = np.clip(np.round(5 + 1.5 * f + rng.normal(size=(400, 5))), 1, 9)
    x = np.hstack([x, x[:, [2]]])
    labels = ["Fretful", "Moody", "Envious", "Touchy", "Temperamental", "Jealous"]
    res = ps.fit_domain(x, labels, [False] * 6, (1, 9), "N", drop)
    assert not res.initial.converged
    assert res.final.converged
    assert res.dropped == (gone,)
    assert res.alpha.k_items == 5


def test_cfa_too_few_items():
    with pytest.raises(StatsError):
        ps.fit_one_factor_cfa(equicorrelated(2, 0.5))


# -- OLS ----------------------------------------------------------------------------------

def test_ols_six_point_bivariate():
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    y = np.array([2.0, 4.1, 5.9, 8.2, 9.8, 12.1])
    # closed-form slope/intercept
    xm, ym = x.mean(), y.mean()
    b1 = ((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum()
    b0 = ym - b1 * xm
    fit = ps.ols_regress(y, x[:, None], ["x"])
    assert fit.coefficients["x"] == pytest.approx(b1, abs=1e-10)
    assert fit.intercept == pytest.approx(b0, abs=1e-10)


def test_ols_exact_linear():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(40, 3))
    y = 1.5 + X @ np.array([2.0, -1.0, 0.5])
    fit = ps.ols_regress(y, X)
    assert fit.r_squared == pytest.approx(1.0)
    assert np.allclose(list(fit.coefficients.values()), [2.0, -1.0, 0.5])
    assert np.max(np.abs(fit.residuals)) < 1e-10


def test_ols_matches_scipy_t_and_orthogonality():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(80, 4))
    y = X @ np.array([0.3, 0.0, -0.2, 0.1]) + rng.normal(size=80)
    fit = ps.ols_regress(y, X)
    A = np.column_stack([np.ones(80), X])
    assert np.max(np.abs(A.T @ fit.residuals)) < 1e-8
    for k, name in enumerate(fit.predictors):
        t = fit.t_stats[name]
        assert fit.p_values[name] == pytest.approx(2 * stats.t.sf(abs(t), 75), abs=1e-10)


def test_ols_rank_deficiency_names_columns():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(30, 2))
    X = np.column_stack([X, X[:, 0] + X[:, 1]])
    with pytest.raises(StatsError, match="'c'.*collinear.*'a'"):
        ps.ols_regress(rng.normal(size=30), X, ["a", "b", "c"])


def test_ols_needs_enough_rows():
    with pytest.raises(StatsError):
        ps.ols_regress([1, 2, 3], np.ones((3, 2)))


def test_ols_standardize_flag():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(100, 2)) * [1, 10]
    y = X @ [1.0, 0.1] + rng.normal(size=100)
    raw = ps.ols_regress(y, X, ["a", "b"])
    std = ps.ols_regress(y, X, ["a", "b"], standardize=True)
    sd = X.std(0, ddof=1)
    assert std.coefficients["a"] == pytest.approx(raw.coefficients["a"] * sd[0])
    assert std.p_values["b"] == pytest.approx(raw.p_values["b"])


def test_p_value_examples():
    assert ps.p_value_t(0.0, 5) == 1.0
    assert ps.p_value_t(1.96, 10000) == pytest.approx(0.05, abs=5e-4)
    assert ps.p_value_t(12.706, 1) == pytest.approx(0.05, abs=1e-3)
    with pytest.raises(StatsError):
        ps.p_value_t(1.0, 0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.integers(1, 500))
def test_p_value_matches_scipy(t, df):
    p = ps.p_value_t(t, df)
    assert 0 <= p <= 1
    assert p == pytest.approx(2 * stats.t.sf(abs(t), df), abs=1e-12)
