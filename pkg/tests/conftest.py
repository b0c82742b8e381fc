"""Shared fixtures: tiny synthetic datasets and pipeline configs."""

import json
from datetime import date
from pathlib import Path

import pytest

from aapm.config import load_config
from aapm.synthetic import SyntheticSpec, make_synthetic


def make_dataset(root: Path, **kw) -> Path:
    """Small synthetic dataset for pipeline tests."""
    spec_kw = dict(
        n_assets=12,
        n_days=70,
        n_factors=3,
        signal_mix="both",
        seed=3,
        n_pretrain_days=25,
        news_per_day=2,
    )
    spec_kw.update(kw)
    data_dir = root / "data"
    make_synthetic(data_dir, SyntheticSpec(**spec_kw))
    return data_dir


def split_boundaries(data_dir: Path, train_frac=0.55, val_frac=0.2):
    """Split the news period of a synthetic dataset by fractions."""
    truth = json.loads((data_dir / "truth.json").read_text())
    first_news = date.fromisoformat(truth["first_news_date"])
    dates = []
    with (data_dir / "returns.csv").open() as fh:
        next(fh)
        seen = set()
        for line in fh:
            d = line.split(",", 1)[0]
            if d not in seen:
                seen.add(d)
                dates.append(date.fromisoformat(d))
    news_dates = [d for d in dates if d >= first_news]
    n = len(news_dates)
    return (
        news_dates[int(n * train_frac)],
        news_dates[int(n * (train_frac + val_frac))],
        news_dates[-1],
    )


def pipeline_config(root: Path, data_dir: Path, **overrides):
    """RunConfig for a fast mock-backed pipeline over a tiny dataset."""
    train_end, val_end, test_end = split_boundaries(data_dir)
    base = {
        "paths.data_dir": str(data_dir),
        "paths.output_dir": str(root / "out"),
        "split.train_end": train_end.isoformat(),
        "split.val_end": val_end.isoformat(),
        "split.test_end": test_end.isoformat(),
        "embedding.backend": "mock",
        "embedding.dim": 16,
        "smoother.window": 2,
        "smoother.eta": 0.95,
        "agent.n_rounds": 1,
        "agent.top_k": 2,
        "network.d_model": 12,
        "network.epochs": 6,
        "network.batch_size": 64,
        "portfolio.tp_window": 15,
    }
    base.update(overrides)
    return load_config(None, [f"{k}={v}" for k, v in base.items()])


@pytest.fixture(scope="session")
def shared_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    return make_dataset(root)
