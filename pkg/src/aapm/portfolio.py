"""Portfolio construction from predicted returns.

Builds tangency weights from prediction moments, decile assignments with
deterministic tie-breaking, equal- and value-weighted long-short books,
and realizes them against next-day panel returns. Rebalancing is daily
and frictionless.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date

import numpy as np

from .data import MarketCapSeries, ReturnPanel

__all__ = [
    "PortfolioReturns",
    "tangency_weights",
    "decile_assign",
    "ls_weights",
    "realize",
    "decile_cumulative",
    "decile_series",
]

log = logging.getLogger(__name__)


@dataclass
class PortfolioReturns:
    """Realized daily excess returns of one portfolio."""

    kind: str
    dates: tuple[date, ...]
    returns: np.ndarray
    dropped_assets: int = 0  # delisted between formation and realization


def tangency_weights(
    predicted: np.ndarray,
    ridge_scale: float = 1e-6,
    max_condition: float = 1e12,
) -> np.ndarray:
    """Mean-variance weights from a lookback window of predicted returns.

    Solves (M + ridge*I) w = mean(pred) with M the uncentered second-moment
    matrix of the window, then rescales to unit gross exposure (sum |w| = 1,
    a free choice since the Sharpe ratio ignores leverage). Columns with
    fewer than two observations are an error; NaN cells are tolerated via
    pairwise-complete moments.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.ndim != 2:
        raise ValueError("predicted must be (window, n_assets)")
    W, n = predicted.shape
    obs = np.sum(~np.isnan(predicted), axis=0)
    if np.any(obs < 2):
        raise ValueError(f"every asset needs >= 2 observations, min is {obs.min()}")
    finite = np.nan_to_num(predicted, nan=0.0)
    present = (~np.isnan(predicted)).astype(np.float64)
    counts = present.T @ present  # pairwise-complete observation counts
    if np.any(counts < 1):
        raise ValueError("some asset pair shares no observations")
    M = (finite.T @ finite) / counts
    mean = np.nansum(predicted, axis=0) / obs
    ridge = ridge_scale * np.trace(M) / n
    M_r = M + ridge * np.eye(n)
    cond = np.linalg.cond(M_r)
    if not np.isfinite(cond) or cond > max_condition:
        raise np.linalg.LinAlgError(
            f"second-moment matrix is numerically singular (condition number {cond:.3e})"
        )
    raw = np.linalg.solve(M_r, mean)
    gross = np.sum(np.abs(raw))
    if gross == 0.0:
        return raw
    return raw / gross


def decile_assign(predictions: dict[int, float]) -> dict[int, int]:
    """Rank assets by prediction and bucket into deciles 1 (lowest) .. 10.

    Rank r (1-based, ascending) maps to decile ceil(10*r/n), which keeps
    bucket sizes within one of each other. Ties break by ascending permno
    so the assignment is deterministic.
    """
    n = len(predictions)
    if n < 10:
        raise ValueError(f"decile assignment needs >= 10 active assets, got {n}")
    for p, v in predictions.items():
        if not np.isfinite(v):
            raise ValueError(f"non-finite prediction for permno {p}")
    ranked = sorted(predictions.items(), key=lambda kv: (kv[1], kv[0]))
    out: dict[int, int] = {}
    for r, (permno, _) in enumerate(ranked, start=1):
        out[permno] = -(-10 * r // n)  # ceil(10*r/n)
    return out


def ls_weights(
    assignments: dict[int, int],
    kind: str,
    caps: dict[int, float] | None = None,
) -> dict[int, float]:
    """Long-short book: +1 gross long in decile 10, -1 gross short in decile 1.

    "ew" splits each leg equally; "vw" splits proportionally to market cap,
    dropping (with a warning) assets whose cap is missing.
    """
    if kind not in ("ew", "vw"):
        raise ValueError(f"kind must be 'ew' or 'vw', got {kind!r}")
    longs = sorted(p for p, d in assignments.items() if d == 10)
    shorts = sorted(p for p, d in assignments.items() if d == 1)
    if not longs or not shorts:
        raise ValueError("missing a long or short leg")
    weights: dict[int, float] = {}
    for leg, sign in ((longs, 1.0), (shorts, -1.0)):
        if kind == "ew":
            for p in leg:
                weights[p] = sign / len(leg)
        else:
            capped = []
            for p in leg:
                cap = None if caps is None else caps.get(p)
                if cap is None or not np.isfinite(cap):
                    log.warning("dropping permno %d from VW leg: missing market cap", p)
                    continue
                capped.append((p, cap))
            if not capped:
                raise ValueError("VW leg has no assets with observed caps")
            total = sum(c for _, c in capped)
            for p, cap in capped:
                weights[p] = sign * cap / total
    return weights


def realize(
    weights_by_date: dict[date, dict[int, float]],
    panel: ReturnPanel,
) -> PortfolioReturns:
    """Next-day realized returns of a daily-rebalanced weight series.

    Weights formed at d earn the panel's excess returns at the following
    calendar entry; assets inactive on the realization day contribute zero
    and are counted.
    """
    dates = panel.calendar.dates
    idx = {d: i for i, d in enumerate(dates)}
    col = {p: j for j, p in enumerate(panel.permnos)}
    realized_dates: list[date] = []
    realized: list[float] = []
    dropped = 0
    for d in sorted(weights_by_date):
        i = idx.get(d)
        if i is None or i + 1 >= len(dates):
            continue
        total = 0.0
        for permno, w in weights_by_date[d].items():
            j = col.get(permno)
            if j is None or not panel.mask[i + 1, j]:
                dropped += 1
                continue
            total += w * panel.excess_returns[i + 1, j]
        realized_dates.append(dates[i + 1])
        realized.append(total)
    if not realized:
        raise ValueError("no overlap between weights and panel dates")
    if dropped:
        log.info("realize: %d position-days hit inactive assets and contributed 0", dropped)
    return PortfolioReturns(
        kind="custom",
        dates=tuple(realized_dates),
        returns=np.asarray(realized),
        dropped_assets=dropped,
    )


def decile_series(
    predictions_by_date: dict[date, dict[int, float]],
    panel: ReturnPanel,
) -> dict[int, PortfolioReturns]:
    """Equal-weight long-only return series for each decile bucket."""
    weights: dict[int, dict[date, dict[int, float]]] = {k: {} for k in range(1, 11)}
    for d, preds in predictions_by_date.items():
        assign = decile_assign(preds)
        for k in range(1, 11):
            members = sorted(p for p, dec in assign.items() if dec == k)
            if members:
                weights[k][d] = {p: 1.0 / len(members) for p in members}
    out = {}
    for k in range(1, 11):
        series = realize(weights[k], panel)
        series.kind = f"decile_{k}"
        out[k] = series
    return out


def decile_cumulative(
    decile_returns: dict[int, PortfolioReturns],
    compounding: str = "product",
) -> dict[int, np.ndarray]:
    """Cumulative return path per decile, compounded or summed."""
    if compounding not in ("sum", "product"):
        raise ValueError(f"compounding must be 'sum' or 'product', got {compounding!r}")
    out = {}
    for k, series in decile_returns.items():
        if compounding == "sum":
            out[k] = np.cumsum(series.returns)
        else:
            out[k] = np.cumprod(1.0 + series.returns) - 1.0
    return out
