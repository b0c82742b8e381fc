"""Panel ingestion, alignment, factor cleaning, and date splits.

Input files are long-format CSVs (returns: date,permno,exret; factors:
date,permno,f1..fN; caps: date,permno,cap) plus a news JSONL. The three
panels are inner-joined on dates and assets and stored as dense
date x asset arrays with an activity mask.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from pathlib import Path

import numpy as np

__all__ = [
    "ParseError",
    "AlignmentError",
    "TradingCalendar",
    "ReturnPanel",
    "FactorPanel",
    "MarketCapSeries",
    "NewsItem",
    "SplitSpec",
    "load_panels",
    "load_news",
    "clean_factors",
    "rank_standardize",
    "split",
]


class ParseError(ValueError):
    """Schema violation in an input file; message names file and line."""


class AlignmentError(ValueError):
    """Panels share no common dates or assets after the inner join."""


@dataclass(frozen=True)
class TradingCalendar:
    """Strictly increasing, duplicate-free list of dataset dates."""

    dates: tuple[date, ...]

    def __post_init__(self) -> None:
        for a, b in zip(self.dates, self.dates[1:]):
            if a >= b:
                raise ValueError(f"calendar not strictly increasing at {a} -> {b}")

    def __len__(self) -> int:
        return len(self.dates)

    def index(self, d: date) -> int:
        lo = int(np.searchsorted(np.array(self.dates), d))
        if lo >= len(self.dates) or self.dates[lo] != d:
            raise KeyError(f"{d} not in calendar")
        return lo

    def __contains__(self, d: date) -> bool:
        try:
            self.index(d)
            return True
        except KeyError:
            return False


@dataclass
class ReturnPanel:
    """Daily excess returns (decimal fractions) with an activity mask."""

    calendar: TradingCalendar
    permnos: tuple[int, ...]
    excess_returns: np.ndarray  # (D, A) float, NaN where inactive
    mask: np.ndarray  # (D, A) bool

    def __post_init__(self) -> None:
        D, A = len(self.calendar), len(self.permnos)
        if self.excess_returns.shape != (D, A) or self.mask.shape != (D, A):
            raise ValueError("panel shape mismatch")
        if not np.all(np.isfinite(self.excess_returns[self.mask])):
            raise ValueError("non-finite return for an active cell")


@dataclass
class FactorPanel:
    """Per-asset factor exposures; staleness marks filled (not observed) cells."""

    calendar: TradingCalendar
    permnos: tuple[int, ...]
    values: np.ndarray  # (D, A, F) float, NaN = missing
    staleness: np.ndarray  # (D, A, F) bool, True = carried-forward/imputed
    factor_names: tuple[str, ...]

    @property
    def n_factors(self) -> int:
        return self.values.shape[2]


@dataclass
class MarketCapSeries:
    """Market capitalizations; positive wherever observed."""

    calendar: TradingCalendar
    permnos: tuple[int, ...]
    caps: np.ndarray  # (D, A) float, NaN = missing


@dataclass(frozen=True)
class NewsItem:
    id: str
    timestamp: datetime
    title: str
    body: str
    category: str


@dataclass(frozen=True)
class SplitSpec:
    """Boundary dates: train ends at train_end, validation at val_end, test at test_end."""

    train_end: date
    val_end: date
    test_end: date

    def __post_init__(self) -> None:
        if not (self.train_end < self.val_end < self.test_end):
            raise ValueError(
                f"split boundaries must satisfy train_end < val_end < test_end, "
                f"got {self.train_end}, {self.val_end}, {self.test_end}"
            )


def _parse_date(token: str, path: Path, line_no: int) -> date:
    try:
        return date.fromisoformat(token.strip())
    except ValueError as err:
        raise ParseError(f"{path}:{line_no}: bad date {token!r}: {err}") from None


def _parse_float(token: str, path: Path, line_no: int, col: str) -> float:
    token = token.strip()
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{path}:{line_no}: non-numeric {col}={token!r}") from None
    if not np.isfinite(value):
        raise ParseError(f"{path}:{line_no}: non-finite {col}={token!r}")
    return value


def _read_long_csv(
    path: Path, value_cols: list[str], allow_missing: bool
) -> tuple[list[str], dict[tuple[date, int], list[float]]]:
    """Read a long-format CSV into {(date, permno): values}.

    Empty value cells are missing (NaN) when allow_missing, otherwise a
    parse error. Literal non-numeric text is always a parse error.
    """
    if not path.exists():
        raise ParseError(f"{path}: file not found")
    rows: dict[tuple[date, int], list[float]] = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}:1: empty file") from None
        header = [h.strip() for h in header]
        if header[:2] != ["date", "permno"]:
            raise ParseError(f"{path}:1: header must start with date,permno, got {header[:2]}")
        if value_cols == ["*"]:
            value_cols = header[2:]
            if not value_cols:
                raise ParseError(f"{path}:1: no value columns in header")
        for col in value_cols:
            if col not in header:
                raise ParseError(f"{path}:1: missing column {col!r}")
        col_idx = [header.index(c) for c in value_cols]
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}")
            d = _parse_date(row[0], path, line_no)
            try:
                permno = int(row[1])
            except ValueError:
                raise ParseError(f"{path}:{line_no}: bad permno {row[1]!r}") from None
            if permno <= 0:
                raise ParseError(f"{path}:{line_no}: permno must be positive, got {permno}")
            values = []
            for idx, col in zip(col_idx, value_cols):
                cell = row[idx].strip()
                if cell == "":
                    if not allow_missing:
                        raise ParseError(f"{path}:{line_no}: empty {col} cell")
                    values.append(np.nan)
                else:
                    values.append(_parse_float(cell, path, line_no, col))
            key = (d, permno)
            if key in rows:
                raise ParseError(f"{path}:{line_no}: duplicate row for {d} permno {permno}")
            rows[key] = values
    return value_cols, rows


def load_panels(
    returns_file: str | Path,
    factors_file: str | Path,
    caps_file: str | Path,
    returns_scale: float = 1.0,
    factors_scale: float = 1.0,
) -> tuple[ReturnPanel, FactorPanel, MarketCapSeries]:
    """Load and inner-join the three panels on dates and permnos.

    Scales divide raw cell values into panel units, e.g. scale=100 for
    percentage-style return files.
    """
    returns_path, factors_path, caps_path = Path(returns_file), Path(factors_file), Path(caps_file)
    _, ret_rows = _read_long_csv(returns_path, ["exret"], allow_missing=False)
    factor_names, fac_rows = _read_long_csv(factors_path, ["*"], allow_missing=True)
    _, cap_rows = _read_long_csv(caps_path, ["cap"], allow_missing=True)

    def date_set(rows):
        return {k[0] for k in rows}

    def asset_set(rows):
        return {k[1] for k in rows}

    dates = sorted(date_set(ret_rows) & date_set(fac_rows) & date_set(cap_rows))
    permnos = sorted(asset_set(ret_rows) & asset_set(fac_rows) & asset_set(cap_rows))
    if not dates or not permnos:
        raise AlignmentError(
            "empty intersection of dates or assets across returns/factors/caps"
        )
    calendar = TradingCalendar(tuple(dates))
    permnos_t = tuple(permnos)
    d_idx = {d: i for i, d in enumerate(dates)}
    a_idx = {p: j for j, p in enumerate(permnos)}
    D, A, F = len(dates), len(permnos), len(factor_names)

    returns = np.full((D, A), np.nan)
    mask = np.zeros((D, A), dtype=bool)
    for (d, p), vals in ret_rows.items():
        if d in d_idx and p in a_idx:
            returns[d_idx[d], a_idx[p]] = vals[0] / returns_scale
            mask[d_idx[d], a_idx[p]] = True

    factors = np.full((D, A, F), np.nan)
    for (d, p), vals in fac_rows.items():
        if d in d_idx and p in a_idx:
            factors[d_idx[d], a_idx[p], :] = np.asarray(vals) / factors_scale

    caps = np.full((D, A), np.nan)
    for (d, p), vals in cap_rows.items():
        if d in d_idx and p in a_idx:
            if not np.isnan(vals[0]) and vals[0] <= 0:
                raise ParseError(f"{caps_path}: non-positive cap for {d} permno {p}")
            caps[d_idx[d], a_idx[p]] = vals[0]

    return (
        ReturnPanel(calendar, permnos_t, returns, mask),
        FactorPanel(
            calendar,
            permnos_t,
            factors,
            np.zeros((D, A, F), dtype=bool),
            tuple(factor_names),
        ),
        MarketCapSeries(calendar, permnos_t, caps),
    )


def load_news(path: str | Path) -> list[NewsItem]:
    """Read the news JSONL, sorted by timestamp then id."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: file not found")
    items: list[NewsItem] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"{path}:{line_no}: bad JSON: {err}") from None
            missing = {"id", "timestamp", "title", "body", "category"} - set(row)
            if missing:
                raise ParseError(f"{path}:{line_no}: missing keys {sorted(missing)}")
            if row["id"] in seen:
                raise ParseError(f"{path}:{line_no}: duplicate news id {row['id']!r}")
            seen.add(row["id"])
            try:
                ts = datetime.fromisoformat(row["timestamp"])
            except ValueError as err:
                raise ParseError(f"{path}:{line_no}: bad timestamp: {err}") from None
            items.append(
                NewsItem(
                    id=row["id"],
                    timestamp=ts,
                    title=row["title"],
                    body=row["body"],
                    category=row["category"],
                )
            )
    items.sort(key=lambda it: (it.timestamp, it.id))
    return items


def clean_factors(panel: FactorPanel) -> FactorPanel:
    """Fill missing factor cells: forward-fill, then cross-sectional median.

    Pass 1 carries the last observed value forward per (asset, factor).
    Pass 2 sets cells still missing (never observed so far) to that date's
    median across assets with values after pass 1; an all-missing
    cross-section falls back to 0.0. Filled cells are flagged stale.
    Observed cells are never modified, and re-cleaning is a no-op.
    """
    values = panel.values.copy()
    staleness = panel.staleness.copy()
    D, A, F = values.shape

    # pass 1: forward fill along time
    for j in range(A):
        for f in range(F):
            last = np.nan
            for t in range(D):
                if np.isnan(values[t, j, f]):
                    if not np.isnan(last):
                        values[t, j, f] = last
                        staleness[t, j, f] = True
                else:
                    last = values[t, j, f]

    # pass 2: cross-sectional median of the post-fill values
    for t in range(D):
        for f in range(F):
            col = values[t, :, f]
            miss = np.isnan(col)
            if not miss.any():
                continue
            present = col[~miss]
            fill = float(np.median(present)) if present.size else 0.0
            col[miss] = fill
            staleness[t, miss, f] = True

    return replace(panel, values=values, staleness=staleness)


def rank_standardize(panel: FactorPanel) -> FactorPanel:
    """Optional per-date rank transform of factor exposures to [-1, 1]."""
    values = panel.values.copy()
    D, A, F = values.shape
    if A > 1:
        for t in range(D):
            for f in range(F):
                col = values[t, :, f]
                ok = ~np.isnan(col)
                n = int(ok.sum())
                if n > 1:
                    order = np.argsort(col[ok], kind="stable")
                    ranks = np.empty(n)
                    ranks[order] = np.arange(n)
                    col[ok] = 2.0 * ranks / (n - 1) - 1.0
    return replace(panel, values=values)


@dataclass(frozen=True)
class DateRange:
    """Contiguous, inclusive slice of a calendar."""

    dates: tuple[date, ...]

    @property
    def start(self) -> date:
        return self.dates[0]

    @property
    def end(self) -> date:
        return self.dates[-1]

    def __len__(self) -> int:
        return len(self.dates)

    def __contains__(self, d: date) -> bool:
        return self.start <= d <= self.end


def split(
    calendar: TradingCalendar, spec: SplitSpec
) -> tuple[DateRange, DateRange, DateRange]:
    """Carve the calendar into train/validation/test up to test_end.

    Ranges are disjoint and contiguous: train covers the calendar start
    through train_end, validation runs to val_end, test to test_end.
    """
    for name, d in (
        ("train_end", spec.train_end),
        ("val_end", spec.val_end),
        ("test_end", spec.test_end),
    ):
        if d not in calendar:
            raise ValueError(f"{name} {d} not in calendar")
    i_train = calendar.index(spec.train_end)
    i_val = calendar.index(spec.val_end)
    i_test = calendar.index(spec.test_end)
    dates = calendar.dates
    train = DateRange(dates[: i_train + 1])
    val = DateRange(dates[i_train + 1 : i_val + 1])
    test = DateRange(dates[i_val + 1 : i_test + 1])
    return train, val, test
