"""Seeded synthetic dataset generator.

Emits a desk-scale stand-in for licensed market/news data in the exact
ingest formats: long CSVs for returns, factors, and caps, a news JSONL
with planted sentiment vocabulary, plus truth.json recording every
generating coefficient and an expected.csv with the noise-free return
component for oracle tests.

Returns are a mix of a linear factor component, a pairwise nonlinear
factor term, a news-sentiment component with per-asset loadings, and
Gaussian noise. News bodies carry graded sentiment words so a text
pipeline can recover the daily signal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from datetime import date, datetime, time, timedelta
from pathlib import Path

import numpy as np

__all__ = ["SyntheticSpec", "make_synthetic", "load_expected"]

SENTIMENT_WORDS = ["plunge", "slump", "steady", "improve", "surge"]
SENTIMENT_VALUES = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
SECTORS = ["energy", "retail", "software", "shipping", "banking", "materials"]
VERBS = ["report", "post", "announce", "disclose", "confirm"]
BLOCKED_BODIES = [
    "A quiet weekend guide with scenic walking routes and seasonal recipes.",
    "Travel notebook: island itineraries and packing essentials for autumn.",
    "Crossword corner and a puzzle medley for the holiday afternoon.",
]


@dataclass(frozen=True)
class SyntheticSpec:
    n_assets: int
    n_days: int  # days covered by news (the main sample)
    n_factors: int
    signal_mix: str = "both"  # both | factors | news
    seed: int = 0
    n_pretrain_days: int = 120
    news_per_day: int = 2
    blocked_per_day: int = 0
    factor_scale: float = 0.010
    nonlinear_scale: float = 0.004
    news_scale: float = 0.010
    noise_std: float = 0.006
    factor_missing_rate: float = 0.02

    def __post_init__(self) -> None:
        if min(self.n_assets, self.n_days, self.n_factors) < 1:
            raise ValueError("n_assets, n_days and n_factors must be positive")
        if self.signal_mix not in ("both", "factors", "news"):
            raise ValueError(f"signal_mix must be both|factors|news, got {self.signal_mix!r}")
        if self.n_pretrain_days < 0 or self.news_per_day < 1:
            raise ValueError("n_pretrain_days must be >= 0 and news_per_day >= 1")


def _weekdays(start: date, count: int) -> list[date]:
    out = []
    d = start
    while len(out) < count:
        if d.weekday() < 5:
            out.append(d)
        d += timedelta(days=1)
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def make_synthetic(out_dir: str | Path, spec: SyntheticSpec) -> dict[str, Path]:
    """Generate the dataset; byte-identical for a fixed spec."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    A, F = spec.n_assets, spec.n_factors
    D = spec.n_pretrain_days + spec.n_days
    dates = _weekdays(date(2021, 1, 4), D)
    permnos = [10001 + i for i in range(A)]

    w_factor = spec.factor_scale if spec.signal_mix in ("both", "factors") else 0.0
    w_nl = spec.nonlinear_scale if spec.signal_mix in ("both", "factors") else 0.0
    w_news = spec.news_scale if spec.signal_mix in ("both", "news") else 0.0

    # AR(1) factor exposures, unit stationary variance
    rho = 0.9
    innovation = np.sqrt(1.0 - rho**2)
    factors = np.empty((D, A, F))
    factors[0] = rng.standard_normal((A, F))
    for t in range(1, D):
        factors[t] = rho * factors[t - 1] + innovation * rng.standard_normal((A, F))

    betas = rng.standard_normal(F) / np.sqrt(F)
    delta = 1.0 + 0.5 * np.abs(rng.standard_normal(A))
    delta /= delta.mean()

    # daily latent sentiment and quantized per-item levels (main days only)
    g = rng.standard_normal(spec.n_days)
    item_levels: list[list[int]] = []
    G = np.zeros(D)
    for k in range(spec.n_days):
        levels = []
        for _ in range(spec.news_per_day):
            z = g[k] + 0.35 * rng.standard_normal()
            levels.append(int(np.clip(np.round(z / 0.8) + 2, 0, 4)))
        item_levels.append(levels)
        G[spec.n_pretrain_days + k] = float(np.mean(SENTIMENT_VALUES[levels]))

    expected = np.zeros((D, A))
    for t in range(1, D):
        lin = factors[t - 1] @ betas
        nl = factors[t - 1, :, 0] * factors[t - 1, :, 1] if F >= 2 else np.zeros(A)
        expected[t] = w_factor * lin + w_nl * nl + w_news * delta * G[t - 1]
    returns = expected + spec.noise_std * rng.standard_normal((D, A))

    caps = np.exp(rng.normal(22.0, 1.0, size=A))[None, :] * np.exp(
        np.cumsum(0.001 * rng.standard_normal((D, A)), axis=0)
    )

    factor_missing = rng.random((D, A, F)) < spec.factor_missing_rate

    paths = {
        "returns": out_dir / "returns.csv",
        "factors": out_dir / "factors.csv",
        "caps": out_dir / "caps.csv",
        "news": out_dir / "news.jsonl",
        "truth": out_dir / "truth.json",
        "expected": out_dir / "expected.csv",
    }

    with paths["returns"].open("w", encoding="utf-8") as fh:
        fh.write("date,permno,exret\n")
        for t, d in enumerate(dates):
            for j, p in enumerate(permnos):
                fh.write(f"{d.isoformat()},{p},{_fmt(returns[t, j])}\n")

    factor_names = [f"f{i + 1}" for i in range(F)]
    with paths["factors"].open("w", encoding="utf-8") as fh:
        fh.write("date,permno," + ",".join(factor_names) + "\n")
        for t, d in enumerate(dates):
            for j, p in enumerate(permnos):
                cells = [
                    "" if factor_missing[t, j, f] else _fmt(factors[t, j, f])
                    for f in range(F)
                ]
                fh.write(f"{d.isoformat()},{p}," + ",".join(cells) + "\n")

    with paths["caps"].open("w", encoding="utf-8") as fh:
        fh.write("date,permno,cap\n")
        for t, d in enumerate(dates):
            for j, p in enumerate(permnos):
                fh.write(f"{d.isoformat()},{p},{_fmt(caps[t, j])}\n")

    with paths["expected"].open("w", encoding="utf-8") as fh:
        fh.write("date,permno,expected\n")
        for t, d in enumerate(dates):
            for j, p in enumerate(permnos):
                fh.write(f"{d.isoformat()},{p},{_fmt(expected[t, j])}\n")

    with paths["news"].open("w", encoding="utf-8") as fh:
        for k in range(spec.n_days):
            d = dates[spec.n_pretrain_days + k]
            for i, level in enumerate(item_levels[k]):
                word = SENTIMENT_WORDS[level]
                sector = SECTORS[(k + i) % len(SECTORS)]
                verb = VERBS[(k + 3 * i) % len(VERBS)]
                company = f"AST{permnos[(k * spec.news_per_day + i) % A]}"
                ts = datetime.combine(d, time(9 + (2 * i) % 8, (17 * (k + i)) % 60))
                body = (
                    f"{company} managers {verb} quarterly results. Demand trends {word} "
                    f"while order books {word}. Management guidance: {word}. Desks see "
                    f"{word} conditions across the {sector} complex."
                )
                row = {
                    "id": f"news-{d.isoformat()}-{i:02d}",
                    "timestamp": ts.isoformat(),
                    "title": f"{company} results {word} amid {sector} demand",
                    "body": body,
                    "category": "markets",
                }
                fh.write(json.dumps(row) + "\n")
            for b in range(spec.blocked_per_day):
                ts = datetime.combine(d, time(18, (7 * (k + b)) % 60))
                row = {
                    "id": f"extra-{d.isoformat()}-{b:02d}",
                    "timestamp": ts.isoformat(),
                    "title": "Weekend leisure roundup",
                    "body": BLOCKED_BODIES[(k + b) % len(BLOCKED_BODIES)],
                    "category": "lifestyle",
                }
                fh.write(json.dumps(row) + "\n")

    truth = {
        "spec": asdict(spec),
        "permnos": permnos,
        "first_news_date": dates[spec.n_pretrain_days].isoformat(),
        "betas": betas.tolist(),
        "news_loadings": delta.tolist(),
        "weights": {"factor": w_factor, "nonlinear": w_nl, "news": w_news},
        "sentiment_values": SENTIMENT_VALUES.tolist(),
        "daily_sentiment": G[spec.n_pretrain_days :].tolist(),
        "ar_rho": rho,
    }
    paths["truth"].write_text(json.dumps(truth, indent=2, sort_keys=True))
    return paths


def load_expected(dataset_dir: str | Path) -> dict[date, dict[int, float]]:
    """Noise-free return component per (date, permno), from expected.csv."""
    path = Path(dataset_dir) / "expected.csv"
    out: dict[date, dict[int, float]] = {}
    with path.open("r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            d_s, p_s, v_s = line.strip().split(",")
            out.setdefault(date.fromisoformat(d_s), {})[int(p_s)] = float(v_s)
    return out
