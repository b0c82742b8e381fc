"""Synthetic dataset generator: determinism, shapes, planted structure."""

import hashlib
import json

import numpy as np
import pytest

from aapm.data import clean_factors, load_news, load_panels
from aapm.synthetic import SENTIMENT_WORDS, SyntheticSpec, load_expected, make_synthetic


def file_hashes(paths):
    return {
        name: hashlib.sha256(path.read_bytes()).hexdigest() for name, path in paths.items()
    }


class TestDeterminism:
    def test_same_seed_byte_identical(self, tmp_path):
        spec = SyntheticSpec(n_assets=8, n_days=30, n_factors=2, seed=11, n_pretrain_days=10)
        h1 = file_hashes(make_synthetic(tmp_path / "a", spec))
        h2 = file_hashes(make_synthetic(tmp_path / "b", spec))
        assert h1 == h2

    def test_different_seed_differs(self, tmp_path):
        base = dict(n_assets=8, n_days=30, n_factors=2, n_pretrain_days=10)
        h1 = file_hashes(make_synthetic(tmp_path / "a", SyntheticSpec(seed=1, **base)))
        h2 = file_hashes(make_synthetic(tmp_path / "b", SyntheticSpec(seed=2, **base)))
        assert h1["returns"] != h2["returns"]


class TestShapes:
    def test_panel_shape_follows_spec(self, tmp_path):
        spec = SyntheticSpec(n_assets=50, n_days=500, n_factors=5, seed=0, n_pretrain_days=0)
        paths = make_synthetic(tmp_path, spec)
        panel, factors, caps = load_panels(paths["returns"], paths["factors"], paths["caps"])
        assert panel.excess_returns.shape == (500, 50)
        assert factors.values.shape == (500, 50, 5)
        assert caps.caps.shape == (500, 50)

    def test_news_days_and_counts(self, tmp_path):
        spec = SyntheticSpec(
            n_assets=6, n_days=20, n_factors=2, seed=4, n_pretrain_days=15, news_per_day=3
        )
        paths = make_synthetic(tmp_path, spec)
        items = load_news(paths["news"])
        assert len(items) == 60
        days = {it.timestamp.date() for it in items}
        assert len(days) == 20
        truth = json.loads(paths["truth"].read_text())
        assert min(days).isoformat() == truth["first_news_date"]

    def test_blocked_items_emitted_when_requested(self, tmp_path):
        spec = SyntheticSpec(
            n_assets=6, n_days=10, n_factors=2, seed=4, n_pretrain_days=0, blocked_per_day=1
        )
        items = load_news(make_synthetic(tmp_path, spec)["news"])
        blocked = [it for it in items if it.category == "lifestyle"]
        assert len(blocked) == 10
        assert all(
            not any(w in it.body for w in SENTIMENT_WORDS) for it in blocked
        )


class TestPlantedStructure:
    def test_expected_plus_noise_equals_returns(self, tmp_path):
        spec = SyntheticSpec(n_assets=10, n_days=60, n_factors=3, seed=5, n_pretrain_days=20)
        paths = make_synthetic(tmp_path, spec)
        panel, _, _ = load_panels(paths["returns"], paths["factors"], paths["caps"])
        expected = load_expected(tmp_path)
        resid = []
        for i, d in enumerate(panel.calendar.dates):
            for j, p in enumerate(panel.permnos):
                resid.append(panel.excess_returns[i, j] - expected[d][p])
        resid = np.asarray(resid)
        assert abs(resid.std() - spec.noise_std) < 0.001
        assert abs(resid.mean()) < 0.001

    def test_factors_only_mix_has_zero_news_weight(self, tmp_path):
        spec = SyntheticSpec(
            n_assets=6, n_days=20, n_factors=2, signal_mix="factors", seed=6, n_pretrain_days=0
        )
        truth = json.loads(make_synthetic(tmp_path, spec)["truth"].read_text())
        assert truth["weights"]["news"] == 0.0
        assert truth["weights"]["factor"] > 0.0

    def test_news_sentiment_words_track_daily_signal(self, tmp_path):
        spec = SyntheticSpec(
            n_assets=6, n_days=40, n_factors=2, seed=7, n_pretrain_days=0, news_per_day=2
        )
        paths = make_synthetic(tmp_path, spec)
        truth = json.loads(paths["truth"].read_text())
        items = load_news(paths["news"])
        values = dict(zip(SENTIMENT_WORDS, truth["sentiment_values"]))
        by_day = {}
        for it in items:
            word = next(w for w in SENTIMENT_WORDS if w in it.body)
            by_day.setdefault(it.timestamp.date(), []).append(values[word])
        recovered = [float(np.mean(v)) for _, v in sorted(by_day.items())]
        assert recovered == pytest.approx(truth["daily_sentiment"])

    def test_factor_missingness_rate(self, tmp_path):
        spec = SyntheticSpec(
            n_assets=20, n_days=100, n_factors=3, seed=8, n_pretrain_days=0,
            factor_missing_rate=0.05,
        )
        paths = make_synthetic(tmp_path, spec)
        _, factors, _ = load_panels(paths["returns"], paths["factors"], paths["caps"])
        rate = float(np.isnan(factors.values).mean())
        assert 0.03 < rate < 0.07
        cleaned = clean_factors(factors)
        assert np.isfinite(cleaned.values).all()

    def test_caps_positive(self, tmp_path):
        spec = SyntheticSpec(n_assets=6, n_days=20, n_factors=2, seed=9, n_pretrain_days=5)
        paths = make_synthetic(tmp_path, spec)
        _, _, caps = load_panels(paths["returns"], paths["factors"], paths["caps"])
        assert np.all(caps.caps > 0)
