"""Performance and pricing-error statistics.

Sharpe ratios and maximum drawdowns for the constructed portfolios, plus
the asset-pricing error battery: per-portfolio alphas from time-series
regressions on model factor returns, their t-statistics, the fraction of
|t| > 1.96, and the joint GRS F-test that all intercepts are zero.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from datetime import date

import numpy as np
from scipy import stats as sstats

from .data import FactorPanel, MarketCapSeries, ReturnPanel

__all__ = [
    "AlphaResult",
    "EvalReport",
    "sharpe",
    "max_drawdown",
    "alpha_stats",
    "grs_test",
    "grs_from_returns",
    "characteristic_portfolios",
    "evaluate_run",
    "format_report_table",
]

log = logging.getLogger(__name__)

T_CRITICAL = 1.96


def sharpe(
    returns: np.ndarray,
    rf: np.ndarray | float = 0.0,
    periods_per_year: int = 252,
) -> float:
    """Annualized Sharpe ratio: mean excess over return volatility.

    Volatility is the sample standard deviation (n-1) of the raw portfolio
    returns, so shifting returns and the risk-free series by the same
    constant leaves the ratio unchanged.
    """
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size < 2:
        raise ValueError("need at least 2 observations")
    rf_arr = np.broadcast_to(np.asarray(rf, dtype=np.float64), returns.shape)
    sd = float(np.std(returns, ddof=1))
    if sd == 0.0:
        raise ValueError("zero return variance: Sharpe ratio undefined")
    excess = float(np.mean(returns) - np.mean(rf_arr))
    return excess / sd * np.sqrt(periods_per_year)


def max_drawdown(
    series: np.ndarray,
    as_percent: bool = True,
    from_returns: bool = False,
) -> float:
    """Largest peak-to-trough decline of a value path.

    With from_returns the series is compounded into a value path starting
    at 1. Percent mode divides each decline by its running peak and
    returns a value in [0, 100].
    """
    series = np.asarray(series, dtype=np.float64)
    if series.size == 0:
        raise ValueError("empty series")
    if from_returns:
        path = np.concatenate([[1.0], np.cumprod(1.0 + series)])
    else:
        path = series
    peaks = np.maximum.accumulate(path)
    if as_percent:
        dd = (peaks - path) / peaks
        return float(np.max(dd) * 100.0)
    return float(np.max(peaks - path))


@dataclass(frozen=True)
class AlphaResult:
    portfolio_id: str
    alpha: float  # raw intercept
    alpha_normalized: float  # |alpha| / sqrt(mean squared return)
    t_stat: float
    residuals: np.ndarray = field(repr=False, compare=False)


def _ols_intercept(y: np.ndarray, F: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Intercept, its OLS standard error, and residuals of y on [1, F]."""
    T, K = F.shape
    X = np.column_stack([np.ones(T), F])
    if np.linalg.matrix_rank(X) < K + 1:
        bad = [
            j
            for j in range(K)
            if np.linalg.matrix_rank(np.delete(X, j + 1, axis=1)) == np.linalg.matrix_rank(X)
        ]
        raise np.linalg.LinAlgError(f"rank-deficient regressors; collinear columns: {bad}")
    XtX_inv = np.linalg.inv(X.T @ X)
    beta = XtX_inv @ X.T @ y
    resid = y - X @ beta
    dof = T - K - 1
    if dof < 1:
        raise ValueError(f"need more than {K + 1} observations, got {T}")
    s2 = float(resid @ resid) / dof
    se = float(np.sqrt(s2 * XtX_inv[0, 0]))
    return float(beta[0]), se, resid


def alpha_stats(
    test_portfolios: dict[str, np.ndarray],
    model_factors: np.ndarray,
) -> list[AlphaResult]:
    """Time-series regression of each test portfolio on the model factors.

    alpha is the intercept; alpha_normalized divides |alpha| by the root
    mean squared return of the portfolio, which removes differences in
    average return scale across portfolios; t is alpha over its OLS
    standard error.
    """
    F = np.asarray(model_factors, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    T, K = F.shape
    if T < K + 2:
        raise ValueError(f"need at least n_factors+2={K + 2} observations, got {T}")
    results = []
    for pid, y in test_portfolios.items():
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (T,):
            raise ValueError(f"portfolio {pid} length {y.shape} misaligned with factors ({T},)")
        alpha, se, resid = _ols_intercept(y, F)
        rms = float(np.sqrt(np.mean(y**2)))
        normalized = abs(alpha) / rms if rms > 0 else np.inf
        # an exactly spanned portfolio leaves only rounding noise in the
        # residuals; its intercept and t-statistic are zero by convention
        if se <= 1e-12 * max(rms, 1e-300):
            t = 0.0 if abs(alpha) <= 1e-12 * max(rms, 1e-300) else np.inf * np.sign(alpha)
        else:
            t = alpha / se
        results.append(AlphaResult(pid, alpha, normalized, t, resid))
    return results


def grs_test(
    alphas: np.ndarray,
    residual_cov: np.ndarray,
    factor_means: np.ndarray,
    factor_cov: np.ndarray,
    T: int,
    N: int,
    K: int,
) -> tuple[float, float]:
    """Joint F-test that all N intercepts are zero.

    GRS = (T/N) * ((T-N-K)/(T-K-1)) * (a' S^-1 a) / (1 + m' W^-1 m) with S
    the unbiased residual covariance (T-K-1 denominator) and W the
    maximum-likelihood factor covariance (T denominator); under the null
    the statistic is F(N, T-N-K). With those estimator conventions the
    N=1 case reduces exactly to the squared intercept t-statistic.
    """
    alphas = np.asarray(alphas, dtype=np.float64).ravel()
    residual_cov = np.atleast_2d(np.asarray(residual_cov, dtype=np.float64))
    factor_means = np.asarray(factor_means, dtype=np.float64).ravel()
    factor_cov = np.atleast_2d(np.asarray(factor_cov, dtype=np.float64))
    if alphas.shape != (N,) or residual_cov.shape != (N, N):
        raise ValueError("alpha/residual covariance shapes do not match N")
    if factor_means.shape != (K,) or factor_cov.shape != (K, K):
        raise ValueError("factor moment shapes do not match K")
    if T <= N + K:
        raise ValueError(f"GRS needs T > N + K, got T={T}, N={N}, K={K}")
    try:
        np.linalg.cholesky(residual_cov)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("residual covariance is not positive definite") from None
    quad_alpha = float(alphas @ np.linalg.solve(residual_cov, alphas))
    quad_mu = float(factor_means @ np.linalg.solve(factor_cov, factor_means))
    statistic = (T / N) * ((T - N - K) / (T - K - 1)) * quad_alpha / (1.0 + quad_mu)
    pvalue = float(sstats.f.sf(statistic, N, T - N - K))
    return statistic, pvalue


def grs_from_returns(
    test_portfolios: dict[str, np.ndarray],
    model_factors: np.ndarray,
) -> tuple[float, float]:
    """Run the regressions and the GRS test with the matching conventions."""
    F = np.asarray(model_factors, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    T, K = F.shape
    results = alpha_stats(test_portfolios, F)
    N = len(results)
    alphas = np.array([r.alpha for r in results])
    resid = np.stack([r.residuals for r in results], axis=1)  # (T, N)
    residual_cov = resid.T @ resid / (T - K - 1)
    factor_means = F.mean(axis=0)
    centered = F - factor_means
    factor_cov = centered.T @ centered / T
    return grs_test(alphas, residual_cov, factor_means, factor_cov, T, N, K)


def characteristic_portfolios(
    factors: FactorPanel,
    panel: ReturnPanel,
    dates: list[date],
    n_quantiles: int = 5,
) -> dict[str, np.ndarray]:
    """Characteristic-sorted long-short spread portfolios as test assets.

    For each factor and date, assets are sorted on the (cleaned) exposure;
    the spread earns the equal-weight top-quantile return minus the bottom
    at the next calendar entry. One series per factor.
    """
    cal = panel.calendar.dates
    idx = {d: i for i, d in enumerate(cal)}
    out: dict[str, list[float]] = {name: [] for name in factors.factor_names}
    for d in dates:
        i = idx.get(d)
        if i is None or i + 1 >= len(cal):
            continue
        active = panel.mask[i] & panel.mask[i + 1]
        if active.sum() < 2 * n_quantiles:
            continue
        nxt = panel.excess_returns[i + 1]
        for f, name in enumerate(factors.factor_names):
            vals = factors.values[i, :, f]
            cols = np.where(active & np.isfinite(vals))[0]
            if cols.size < 2 * n_quantiles:
                continue
            order = cols[np.argsort(vals[cols], kind="stable")]
            q = max(1, cols.size // n_quantiles)
            bottom, top = order[:q], order[-q:]
            out[name].append(float(np.mean(nxt[top]) - np.mean(nxt[bottom])))
    return {name: np.asarray(series) for name, series in out.items() if len(series) >= 3}


@dataclass
class EvalReport:
    """Headline metrics mirroring the portfolio and pricing-error tables."""

    sharpe: dict[str, float]  # per portfolio kind: tp, ew, vw
    mdd: dict[str, float]  # percent of running peak
    avg_abs_alpha: float
    avg_abs_t: float
    frac_t_gt_196: float
    grs_stat: float
    grs_pvalue: float
    n_test_assets: int
    n_obs: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def evaluate_run(
    portfolio_returns: dict[str, np.ndarray],
    test_portfolios: dict[str, np.ndarray],
    model_factors: np.ndarray,
    periods_per_year: int = 252,
) -> EvalReport:
    """Compute the full metric battery for one run."""
    sr = {k: sharpe(v, 0.0, periods_per_year) for k, v in portfolio_returns.items()}
    dd = {k: max_drawdown(v, as_percent=True, from_returns=True) for k, v in portfolio_returns.items()}
    results = alpha_stats(test_portfolios, model_factors)
    n = len(results)
    avg_abs_alpha = float(np.mean([r.alpha_normalized for r in results]))
    avg_abs_t = float(np.mean([abs(r.t_stat) for r in results]))
    frac = float(np.mean([abs(r.t_stat) > T_CRITICAL for r in results]))
    F = np.asarray(model_factors)
    n_obs = F.shape[0] if F.ndim > 0 else 0
    grs_stat, grs_p = grs_from_returns(test_portfolios, model_factors)
    return EvalReport(
        sharpe=sr,
        mdd=dd,
        avg_abs_alpha=avg_abs_alpha,
        avg_abs_t=avg_abs_t,
        frac_t_gt_196=frac,
        grs_stat=grs_stat,
        grs_pvalue=grs_p,
        n_test_assets=n,
        n_obs=int(n_obs),
    )


def format_report_table(report: EvalReport) -> str:
    """Aligned text table with the portfolio and pricing-error blocks."""
    kinds = sorted(report.sharpe)
    lines = []
    lines.append(f"{'portfolio':<12}{'SR':>10}{'MDD (%)':>12}")
    for k in kinds:
        lines.append(f"{k:<12}{report.sharpe[k]:>10.3f}{report.mdd[k]:>12.3f}")
    lines.append("")
    lines.append(f"{'metric':<24}{'value':>12}")
    rows = [
        ("avg |alpha|", report.avg_abs_alpha),
        ("avg |t(alpha)|", report.avg_abs_t),
        ("frac |t|>1.96", report.frac_t_gt_196),
        ("GRS", report.grs_stat),
        ("GRS p-value", report.grs_pvalue),
    ]
    for name, value in rows:
        lines.append(f"{name:<24}{value:>12.4f}")
    lines.append("")
    lines.append(f"test assets: {report.n_test_assets}, observations: {report.n_obs}")
    return "\n".join(lines)
