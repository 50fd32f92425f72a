"""Correlations, reliability, one-factor CFA and OLS with t-tests."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, special

from .scales import DOMAINS

log = logging.getLogger(__name__)

PSI_FLOOR = 1e-4
DET_FLOOR = 1e-10
PERFECT_R = 1 - 1e-9


class StatsError(ValueError):
    pass


# -- correlation ---------------------------------------------------------------

def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("pearson needs two 1-D vectors of equal length")
    if x.size < 3:
        raise StatsError("pearson needs at least 3 observations")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(dx @ dx), math.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise StatsError("correlation undefined for a constant vector")
    return float(np.clip(dx @ dy / (sx * sy), -1.0, 1.0))


@dataclass(frozen=True)
class CorrelationMatrix:
    labels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "values", v)
        if v.shape != (len(self.labels), len(self.labels)):
            raise StatsError("correlation matrix shape does not match labels")
        if not np.allclose(v, v.T, atol=1e-12, rtol=0):
            raise StatsError("correlation matrix is not symmetric")
        if not np.allclose(np.diag(v), 1.0, atol=1e-12, rtol=0):
            raise StatsError("correlation matrix needs a unit diagonal")
        if np.any(np.abs(v) > 1 + 1e-12):
            raise StatsError("correlation entries must lie in [-1, 1]")

    @classmethod
    def from_data(cls, data: np.ndarray, labels: Sequence[str]) -> "CorrelationMatrix":
        data = np.asarray(data, dtype=float)
        sd = data.std(axis=0)
        if np.any(sd == 0):
            bad = labels[int(np.flatnonzero(sd == 0)[0])]
            raise StatsError(f"column {bad!r} is constant")
        r = np.corrcoef(data, rowvar=False)
        r = (r + r.T) / 2
        np.fill_diagonal(r, 1.0)
        return cls(tuple(labels), np.clip(r, -1, 1))


@dataclass(frozen=True)
class ConvergentTable:
    correlations: dict[str, float]

    @property
    def average(self) -> float:
        return float(np.mean([self.correlations[d] for d in DOMAINS]))


def convergent_table(
    inputs: Mapping[str, Mapping[str, float]],
    outputs: Mapping[str, Mapping[str, float]],
) -> ConvergentTable:
    """Per-domain Pearson r between matched agents' domain scores.

    ``inputs`` and ``outputs`` map agent id to a domain -> score mapping.
    """
    if set(inputs) != set(outputs):
        only = sorted(set(inputs) ^ set(outputs))
        raise StatsError(f"agent sets differ (e.g. {only[0]!r})")
    ids = sorted(inputs)
    return ConvergentTable(
        {d: pearson([inputs[a][d] for a in ids], [outputs[a][d] for a in ids]) for d in DOMAINS}
    )


# -- reliability -----------------------------------------------------------------

@dataclass(frozen=True)
class AlphaReport:
    domain: str
    alpha: float
    k_items: int
    dropped_items: tuple[str, ...] = ()


def recode(items: np.ndarray, reversed_mask: Sequence[bool], lo: int, hi: int) -> np.ndarray:
    items = np.array(items, dtype=float)
    mask = np.asarray(reversed_mask, dtype=bool)
    items[:, mask] = lo + hi - items[:, mask]
    return items


def cronbach_alpha(
    items: np.ndarray,
    reversed_mask: Sequence[bool] | None = None,
    response_range: tuple[int, int] = (1, 9),
    domain: str = "",
    dropped: Sequence[str] = (),
) -> AlphaReport:
    """``k/(k-1) * (1 - sum(item variances) / variance(total))`` with N-1 denominators."""
    x = np.asarray(items, dtype=float)
    if x.ndim != 2:
        raise StatsError("alpha needs an N x k matrix")
    n, k = x.shape
    if k < 2 or n < 3:
        raise StatsError("alpha needs k >= 2 items and N >= 3 respondents")
    if reversed_mask is not None:
        x = recode(x, reversed_mask, *response_range)
    total_var = x.sum(axis=1).var(ddof=1)
    if total_var == 0:
        raise StatsError("total score has zero variance")
    alpha = k / (k - 1) * (1 - x.var(axis=0, ddof=1).sum() / total_var)
    return AlphaReport(domain, float(alpha), k, tuple(dropped))


# -- one-factor CFA ----------------------------------------------------------------

@dataclass
class CfaFit:
    items: tuple[str, ...]
    loadings: dict[str, float]
    uniquenesses: dict[str, float]
    fit_value: float
    converged: bool
    iterations: int
    heywood_flags: list[str] = field(default_factory=list)
    diagnosis: str = ""
    collinear_pair: tuple[str, str] | None = None


def ml_discrepancy(theta: np.ndarray, R: np.ndarray) -> float:
    """``ln|S| - ln|R| + tr(R S^-1) - p`` for ``S = l l' + diag(psi)``."""
    p = R.shape[0]
    lam, psi = theta[:p], theta[p:]
    S = np.outer(lam, lam) + np.diag(psi)
    sign, logdet = np.linalg.slogdet(S)
    if sign <= 0:
        return np.inf
    _, logdet_r = np.linalg.slogdet(R)
    return float(logdet - logdet_r + np.trace(np.linalg.solve(S, R)) - p)


def ml_gradient(theta: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Analytic gradient: with ``G = S^-1 (S - R) S^-1``, dF/dl = 2 G l, dF/dpsi = diag(G)."""
    p = R.shape[0]
    lam, psi = theta[:p], theta[p:]
    S = np.outer(lam, lam) + np.diag(psi)
    Si = np.linalg.inv(S)
    G = Si @ (S - R) @ Si
    return np.concatenate([2 * G @ lam, np.diag(G).copy()])


def collinearity_gate(R: np.ndarray, labels: Sequence[str]) -> tuple[str, str] | None:
    """Return the most collinear item pair when R is numerically singular."""
    p = R.shape[0]
    off = np.abs(R - np.eye(p))
    i, j = np.unravel_index(np.argmax(off), off.shape)
    if off[i, j] >= PERFECT_R or np.linalg.det(R) < DET_FLOOR:
        a, b = sorted((int(i), int(j)))
        return labels[a], labels[b]
    return None


def fit_one_factor_cfa(corr: CorrelationMatrix, max_iter: int = 2000, tol: float = 1e-15) -> CfaFit:
    """Maximum-likelihood one-factor model on a correlation matrix.

    Factor variance is fixed at 1; uniquenesses are bounded below by
    ``PSI_FLOOR`` and items sitting on that bound are flagged as Heywood
    cases. Loadings are returned standardized and oriented so that they sum
    to a non-negative value. Singular input is not fitted: the result is
    marked non-converged with the offending pair named.
    """
    R = corr.values
    p = R.shape[0]
    labels = corr.labels
    if p < 3:
        raise StatsError("one-factor CFA needs at least 3 items")
    pair = collinearity_gate(R, labels)
    if pair is not None:
        r = R[labels.index(pair[0]), labels.index(pair[1])]
        msg = (
            f"model not identified: multicollinearity between {pair[0]!r} and {pair[1]!r} "
            f"(r = {r:.3f}); drop one of them and refit"
        )
        nan = {k: float("nan") for k in labels}
        return CfaFit(tuple(labels), nan, dict(nan), float("nan"), False, 0, [], msg, pair)

    # start from squared-multiple-correlation communalities
    smc = np.clip(1 - 1 / np.diag(np.linalg.inv(R)), 0.05, 0.95)
    theta0 = np.concatenate([np.sqrt(smc), 1 - smc])
    bounds = [(None, None)] * p + [(PSI_FLOOR, None)] * p
    res = optimize.minimize(
        ml_discrepancy,
        theta0,
        args=(R,),
        jac=ml_gradient,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-10},
    )
    lam, psi = res.x[:p], res.x[p:]
    grad = ml_gradient(res.x, R)
    # projected gradient: components pinned at the lower bound may stay positive
    proj = np.where((res.x > PSI_FLOOR * (1 + 1e-6)) | (np.arange(2 * p) < p), grad, np.minimum(grad, 0))
    converged = bool(np.isfinite(res.fun) and np.max(np.abs(proj)) < 1e-5)
    implied = lam**2 + psi
    lam_std = lam / np.sqrt(implied)
    psi_std = psi / implied
    if lam_std.sum() < 0:
        lam_std = -lam_std
    heywood = [labels[k] for k in range(p) if psi[k] <= PSI_FLOOR * (1 + 1e-6)]
    diag = "" if converged else f"optimizer stopped without convergence: {res.message}"
    return CfaFit(
        tuple(labels),
        dict(zip(labels, map(float, lam_std))),
        dict(zip(labels, map(float, psi_std))),
        float(res.fun),
        converged,
        int(res.nit),
        heywood,
        diag,
    )


@dataclass
class DomainFit:
    domain: str
    initial: CfaFit
    final: CfaFit
    alpha: AlphaReport

    @property
    def dropped(self) -> tuple[str, ...]:
        return self.alpha.dropped_items


def fit_domain(
    data: np.ndarray,
    labels: Sequence[str],
    reversed_mask: Sequence[bool],
    response_range: tuple[int, int],
    domain: str = "",
    drop: str = "last",
) -> DomainFit:
    """CFA plus alpha for one domain, dropping collinear items until the model is identified.

    ``drop`` selects which member of a perfectly correlated pair is removed
    (``"first"`` or ``"last"`` in item order).
    """
    x = recode(data, reversed_mask, *response_range)
    labels = list(labels)
    dropped: list[str] = []
    initial = fit = fit_one_factor_cfa(CorrelationMatrix.from_data(x, labels))
    while fit.collinear_pair is not None and len(labels) > 3:
        a, b = fit.collinear_pair
        gone = a if drop == "first" else b
        log.info("domain %s: dropping %s (collinear with %s)", domain, gone, b if gone == a else a)
        keep = [k for k, lab in enumerate(labels) if lab != gone]
        x = x[:, keep]
        labels = [labels[k] for k in keep]
        dropped.append(gone)
        fit = fit_one_factor_cfa(CorrelationMatrix.from_data(x, labels))
    alpha = cronbach_alpha(x, domain=domain, dropped=dropped)
    return DomainFit(domain, initial, fit, alpha)


# -- regression ---------------------------------------------------------------------

def p_value_t(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t via the regularized incomplete beta."""
    if df < 1:
        raise StatsError("degrees of freedom must be >= 1")
    if not math.isfinite(t):
        return 0.0
    t2 = t * t
    # use the complementary form near t = 0 where df / (df + t^2) rounds towards 1
    if t2 < df:
        p = 1.0 - special.betainc(0.5, df / 2, t2 / (df + t2))
    else:
        p = special.betainc(df / 2, 0.5, df / (df + t2))
    return float(min(1.0, max(0.0, p)))


@dataclass
class RegressionFit:
    predictors: tuple[str, ...]
    coefficients: dict[str, float]
    std_errors: dict[str, float]
    t_stats: dict[str, float]
    p_values: dict[str, float]
    intercept: float
    r_squared: float
    n: int
    residuals: np.ndarray = field(repr=False, default=None)

    def starred(self, name: str, alpha: float = 0.05) -> str:
        b = self.coefficients[name]
        return f"{b:.3f}" + ("*" if self.p_values[name] < alpha else "")


def ols_regress(
    y: Sequence[float],
    X: np.ndarray,
    names: Sequence[str] | None = None,
    standardize: bool = False,
) -> RegressionFit:
    """OLS with intercept via Householder QR; t-tests on N - p - 1 df."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    names = tuple(names) if names is not None else tuple(f"x{k + 1}" for k in range(p))
    if len(y) != n:
        raise StatsError("y and X have different numbers of rows")
    if n <= p + 1:
        raise StatsError(f"need N > p + 1 observations (N={n}, p={p})")
    if standardize:
        sd = X.std(axis=0, ddof=1)
        if np.any(sd == 0):
            raise StatsError(f"predictor {names[int(np.flatnonzero(sd == 0)[0])]!r} is constant")
        X = (X - X.mean(axis=0)) / sd
    A = np.column_stack([np.ones(n), X])
    Q, Rm = np.linalg.qr(A)
    diag = np.abs(np.diag(Rm))
    if np.any(diag <= 1e-10 * max(diag.max(), 1.0)):
        _raise_rank(A, ("intercept",) + names)
    beta = np.linalg.solve(Rm, Q.T @ y)
    resid = y - A @ beta
    dof = n - p - 1
    sigma2 = resid @ resid / dof
    Rinv = np.linalg.inv(Rm)
    cov = sigma2 * (Rinv @ Rinv.T)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.inf * np.sign(beta)))
    pv = [p_value_t(float(tk), dof) for tk in t]
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 if ss_tot == 0 else float(max(0.0, min(1.0, 1 - resid @ resid / ss_tot)))
    return RegressionFit(
        names,
        dict(zip(names, map(float, beta[1:]))),
        dict(zip(names, map(float, se[1:]))),
        dict(zip(names, map(float, t[1:]))),
        dict(zip(names, pv[1:])),
        float(beta[0]),
        r2,
        n,
        resid,
    )


def _raise_rank(A: np.ndarray, names: Sequence[str]) -> None:
    # find the first column that is a linear combination of earlier ones
    for k in range(1, A.shape[1]):
        if np.linalg.matrix_rank(A[:, : k + 1]) <= np.linalg.matrix_rank(A[:, :k]):
            coef, *_ = np.linalg.lstsq(A[:, :k], A[:, k], rcond=None)
            partners = [names[j] for j in np.flatnonzero(np.abs(coef) > 1e-8)]
            raise StatsError(
                f"design matrix is rank deficient: {names[k]!r} is collinear with {', '.join(map(repr, partners))}"
            )
    raise StatsError("design matrix is rank deficient")
