"""Acceptance suite: one test per criterion, with its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one summary line
per criterion. Expected values are either hand-derived, independently
computed by an oracle in this file, or frozen from a verified seeded run.
"""

import json
import time
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np
import pytest

from aapm.agent import (
    AgentConfig,
    AgentRuntime,
    AgentState,
    MockChatBackend,
    Note,
    PromptSet,
    run_day,
)
from aapm.config import load_config
from aapm.data import NewsItem, clean_factors, load_panels
from aapm.embedding import MockEmbeddingBackend, kernel_weights
from aapm.evaluation import alpha_stats, grs_from_returns, max_drawdown, sharpe
from aapm.memory import MemoryItem, MemoryStore
from aapm.network import Dataset, Network, NetworkConfig, pretrain, train
from aapm.pipeline import _build_dataset, run_dir_for, run_pipeline, run_stage
from aapm.portfolio import decile_cumulative, decile_series
from aapm.synthetic import SyntheticSpec, load_expected, make_synthetic
from tests.conftest import make_dataset, pipeline_config
from tests.test_network import finite_difference_check, kink_distance

FIXTURES = Path(__file__).parent / "fixtures"

# frozen from the verified seed-7 implementer run (criterion 5)
GOLDEN_SYNERGY_MARGIN = 0.5793

def announce(n, detail):
    print(f"\n[criterion {n}] PASS: {detail}")


# ---------------------------------------------------------------------------


def test_criterion_1_kernel_correctness():
    t0 = time.time()
    w = kernel_weights(3, 0.5)
    assert np.max(np.abs(w - np.array([1 / 7, 2 / 7, 4 / 7]))) < 1e-12
    for L in range(1, 201):
        for eta in (0.5, 0.9, 0.99, 1.0):
            assert abs(kernel_weights(L, eta).sum() - 1.0) < 1e-12
    elapsed = time.time() - t0
    assert elapsed < 1.0
    announce(1, f"kernel fixture exact, 800 weight vectors sum to 1 ({elapsed:.2f}s < 1s)")


def test_criterion_2_gradient_fidelity():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    checked = 0
    worst = 0.0
    while checked < 100:
        n_factors = int(rng.integers(0, 4))
        cfg = NetworkConfig(
            d_model=int(rng.integers(2, 7)),
            d_emb=int(rng.integers(1, 6)),
            n_factors=n_factors,
            n_assets=int(rng.integers(1, 5)),
            n_hidden_layers=int(rng.integers(0, 3)),
            dropout_rate=0.0,
            seed=int(rng.integers(0, 10_000)),
            use_factors=n_factors > 0,
            use_asset_emb=bool(rng.integers(0, 2)),
            batchnorm=bool(rng.integers(0, 2)),
        )
        net = Network(cfg)
        n = int(rng.integers(3, 9))
        S = rng.normal(size=(n, cfg.d_emb))
        V = rng.normal(size=(n, cfg.n_factors)) if cfg.use_factors else None
        A = rng.integers(0, cfg.n_assets, size=n)
        y = rng.normal(scale=0.5, size=n)
        batch = Dataset(S, V, A, y)
        if kink_distance(net, batch) < 1e-3:
            continue  # central differences are invalid next to a ReLU kink
        worst = max(worst, finite_difference_check(net, batch, step=1e-5))
        assert worst < 1e-4
        checked += 1
    elapsed = time.time() - t0
    assert elapsed < 60.0
    announce(2, f"100 configs, worst relative gradient error {worst:.2e} ({elapsed:.1f}s < 60s)")


def test_criterion_3_retrieval_oracle():
    from tests.test_memory import brute_force_retrieve

    t0 = time.time()
    rng = np.random.default_rng(77)
    base = datetime(2022, 1, 1)
    total_items = 0
    for trial in range(1000):
        dim = int(rng.integers(3, 13))
        size = int(rng.integers(500, 5001)) if trial % 100 == 0 else int(rng.integers(1, 301))
        store = MemoryStore(dimension=dim)
        pool = rng.normal(size=(max(2, size // 4), dim))  # duplicates force ties
        hours = rng.integers(0, 2000, size=size)
        for i in range(size):
            store.add(
                MemoryItem(
                    id=f"m{i:05d}",
                    text="",
                    embedding=pool[int(rng.integers(len(pool)))],
                    source="knowledge_base",
                    timestamp=base + timedelta(hours=int(hours[i])),
                )
            )
        total_items += size
        query = pool[int(rng.integers(len(pool)))] + 0.01 * rng.normal(size=dim)
        k = int(rng.integers(1, size + 2))
        as_of = base + timedelta(hours=int(rng.integers(0, 2000)))
        got = [it.id for it in store.retrieve(query, k=k, as_of=as_of)]
        want = [it.id for it in brute_force_retrieve(store, query, k, as_of)]
        assert got == want
    elapsed = time.time() - t0
    assert elapsed < 30.0
    announce(3, f"1000 stores ({total_items} items) match brute force exactly ({elapsed:.1f}s < 30s)")


def test_criterion_4_statistics_oracles():
    t0 = time.time()
    # fixture cases at 1e-10
    assert abs(sharpe(np.array([0.01, 0.03]), 0.0, 1) - np.sqrt(2.0)) < 1e-10
    assert abs(max_drawdown(np.array([100.0, 120.0, 90.0, 110.0])) - 25.0) < 1e-10
    assert abs(max_drawdown(np.array([100.0, 50.0])) - 50.0) < 1e-10

    # closed-form simple regression on five points
    f = np.array([0.01, -0.02, 0.03, 0.0, -0.01])
    y = np.array([0.02, -0.01, 0.05, 0.01, -0.02])
    fbar, ybar = f.mean(), y.mean()
    sxx = np.sum((f - fbar) ** 2)
    slope = np.sum((f - fbar) * (y - ybar)) / sxx
    alpha_oracle = ybar - slope * fbar
    resid = y - alpha_oracle - slope * f
    s2 = resid @ resid / 3
    t_oracle = alpha_oracle / np.sqrt(s2 * (1 / 5 + fbar**2 / sxx))
    res = alpha_stats({"p": y}, f)[0]
    assert abs(res.alpha - alpha_oracle) < 1e-10
    assert abs(res.t_stat - t_oracle) < 1e-10

    # GRS at N=1 equals the squared intercept t-statistic
    rng = np.random.default_rng(7)
    f1 = rng.normal(0.004, 0.02, size=40)
    y1 = 0.002 + 1.2 * f1 + rng.normal(0, 0.01, size=40)
    stat, _ = grs_from_returns({"p": y1}, f1)
    t1 = alpha_stats({"p": y1}, f1)[0].t_stat
    assert abs(stat - t1**2) < 1e-10 * max(1.0, t1**2)

    # Monte-Carlo null calibration: 500 seeded replications at the 5% level
    rng = np.random.default_rng(1234)
    T, N = 120, 5
    betas = rng.normal(1.0, 0.2, size=N)
    rejections = 0
    for _ in range(500):
        fac = rng.normal(0.004, 0.02, size=T)
        eps = rng.normal(0.0, 0.01, size=(T, N))
        portfolios = {f"p{i}": betas[i] * fac + eps[:, i] for i in range(N)}
        _, p = grs_from_returns(portfolios, fac)
        rejections += p < 0.05
    rate = rejections / 500
    assert 0.03 <= rate <= 0.07
    elapsed = time.time() - t0
    assert elapsed < 120.0
    announce(4, f"fixtures at 1e-10, GRS null rejection rate {rate:.1%} in [3%, 7%] ({elapsed:.1f}s < 120s)")


# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def synergy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synergy")
    data = root / "data"
    make_synthetic(
        data,
        SyntheticSpec(
            n_assets=50,
            n_days=500,
            n_factors=5,
            signal_mix="both",
            seed=7,
            n_pretrain_days=120,
            news_per_day=2,
        ),
    )
    return root, data


def _news_split(data: Path, fracs=(0.375, 0.5)):
    truth = json.loads((data / "truth.json").read_text())
    first_news = date.fromisoformat(truth["first_news_date"])
    dates, seen = [], set()
    with (data / "returns.csv").open() as fh:
        next(fh)
        for line in fh:
            d = line.split(",", 1)[0]
            if d not in seen:
                seen.add(d)
                dates.append(date.fromisoformat(d))
    news_dates = [d for d in dates if d >= first_news]
    n = len(news_dates)
    return news_dates[int(n * fracs[0])], news_dates[int(n * fracs[1])], news_dates[-1]


def _ladder_config(root, data, flags, block_all_news=False):
    train_end, val_end, test_end = _news_split(data)
    overrides = [
        f"paths.data_dir={data}",
        f"paths.output_dir={root / 'out'}",
        f"split.train_end={train_end}",
        f"split.val_end={val_end}",
        f"split.test_end={test_end}",
        "embedding.backend=mock",
        "embedding.dim=24",
        "smoother.window=1",
        "smoother.eta=0.95",
        "agent.n_rounds=1",
        "agent.top_k=3",
        "agent.max_chars=400",
        "agent.overlap_chars=40",
        "network.d_model=24",
        "network.n_hidden_layers=1",
        "network.epochs=40",
        "network.batch_size=256",
        "network.learning_rate=2e-3",
        "portfolio.tp_window=60",
        "run.seed=7",
    ]
    overrides += [f"flags.{k}={'true' if v else 'false'}" for k, v in flags.items()]
    if block_all_news:
        overrides.append(
            "agent.category_blocklist=travel,lifestyle,puzzles,markets,economy,business"
        )
    return load_config(None, overrides)


def _run_and_collect(cfg):
    run_pipeline(cfg, through="evaluate")
    rd = run_dir_for(cfg)
    meta = json.loads((rd / "train" / "meta.json").read_text())
    obj = json.loads((rd / "evaluate" / "objectives.json").read_text())
    return meta["best_val_mse"], obj["ew_sharpe_test"]


def test_criterion_5_hybrid_synergy(synergy_dataset):
    t0 = time.time()
    root, data = synergy_dataset
    ladder = {
        "naive": dict(use_memory=False, use_asset_emb=False, use_factors=False,
                      pretrain=False, refine=False, notes=False),
        "memory": dict(use_memory=True, use_asset_emb=True, use_factors=False,
                       pretrain=False, refine=False, notes=False),
        "hybrid": dict(use_memory=True, use_asset_emb=True, use_factors=True,
                       pretrain=True, refine=False, notes=False),
    }
    mse, sr = {}, {}
    for name, flags in ladder.items():
        mse[name], sr[name] = _run_and_collect(_ladder_config(root, data, flags))
    factors_flags = dict(use_memory=False, use_asset_emb=True, use_factors=True,
                         pretrain=True, refine=False, notes=False)
    _, sr_factors = _run_and_collect(
        _ladder_config(root, data, factors_flags, block_all_news=True)
    )
    assert mse["hybrid"] < mse["memory"] < mse["naive"]
    margin = sr["hybrid"] / sr_factors - 1.0
    assert margin >= 0.05
    assert margin == pytest.approx(GOLDEN_SYNERGY_MARGIN, rel=0.02)
    elapsed = time.time() - t0
    assert elapsed < 600.0
    announce(
        5,
        f"val MSE hybrid {mse['hybrid']:.2e} < memory {mse['memory']:.2e} < naive "
        f"{mse['naive']:.2e}; EW SR margin {margin:+.1%} >= 5% (golden "
        f"{GOLDEN_SYNERGY_MARGIN:+.1%}) ({elapsed:.0f}s < 600s)",
    )


def test_criterion_6_decile_monotonicity(synergy_dataset):
    t0 = time.time()
    _, data = synergy_dataset
    panel, _, _ = load_panels(data / "returns.csv", data / "factors.csv", data / "caps.csv")
    expected = load_expected(data)
    truth = json.loads((data / "truth.json").read_text())
    first_news = date.fromisoformat(truth["first_news_date"])
    preds = {
        d: dict(expected[panel.calendar.dates[i + 1]])
        for i, d in enumerate(panel.calendar.dates[:-1])
        if d >= first_news
    }
    series = decile_series(preds, panel)
    cum = decile_cumulative(series, compounding="product")
    terminal = [cum[k][-1] for k in range(1, 11)]
    assert all(a < b for a, b in zip(terminal, terminal[1:]))
    elapsed = time.time() - t0
    assert elapsed < 60.0
    announce(
        6,
        f"terminal decile returns strictly increasing: D1 {terminal[0]:+.2f} .. "
        f"D10 {terminal[-1]:+.2f} ({elapsed:.1f}s < 60s)",
    )


def test_criterion_7_agent_loop_accounting():
    t0 = time.time()
    prompts = PromptSet.bundled()
    backend = MockChatBackend(prompts=prompts, skip_marker="offtopicfiller")
    embedder = MockEmbeddingBackend(dim=16)
    cfg = AgentConfig(n_rounds=3, top_k=5)
    store = MemoryStore(dimension=16)
    for i in range(8):
        text = f"knowledge chunk {i} about markets and rates"
        store.add(
            MemoryItem(
                id=f"kb{i}", text=text, embedding=embedder.embed_text(text),
                source="knowledge_base", timestamp=datetime(1970, 1, 1),
            )
        )
    runtime = AgentRuntime(chat=backend, embedder=embedder, cfg=cfg, prompts=prompts)

    items = []
    for i in range(20):
        body = (
            "pure offtopicfiller content with nothing else"
            if i in (3, 8, 12, 17)
            else f"Issuer {i} reports demand surge and strong order books."
        )
        items.append(
            NewsItem(
                id=f"n{i:03d}",
                timestamp=datetime(2022, 3, 1, 8, 0) + timedelta(minutes=13 * i),
                title=f"headline {i}",
                body=body,
                category="markets",
            )
        )
    state = AgentState(note=Note("macro backdrop", datetime(2022, 3, 1)), store=store)
    reports, state = run_day(items, state, runtime)

    finals = [r for r in reports if r.final]
    assert len(finals) == 16
    assert len(store) == 8 + 16
    analysis_calls = backend.call_count({"refine", "open", "round", "direct"})
    assert analysis_calls == 20 * 1 + 16 * (1 + 3)
    assert backend.call_count({"note"}) == 16
    elapsed = time.time() - t0
    assert elapsed < 10.0
    announce(
        7,
        f"16 final reports, memory +16, {analysis_calls} analysis calls "
        f"(= 20*1 + 16*(1+3)), 16 note updates ({elapsed:.1f}s < 10s)",
    )


def test_criterion_8_pretraining_effect(tmp_path):
    t0 = time.time()
    data = tmp_path / "data"
    make_synthetic(
        data,
        SyntheticSpec(
            n_assets=30, n_days=200, n_factors=4, signal_mix="factors",
            seed=11, n_pretrain_days=150, news_per_day=1,
        ),
    )
    panel, factors, _ = load_panels(data / "returns.csv", data / "factors.csv", data / "caps.csv")
    factors = clean_factors(factors)
    truth = json.loads((data / "truth.json").read_text())
    first_news = date.fromisoformat(truth["first_news_date"])
    cal = panel.calendar.dates
    pre_dates = [d for d in cal if d < first_news]
    news_dates = [d for d in cal if d >= first_news]
    d_emb = 8
    S = np.zeros((len(cal), d_emb))
    pre_data = _build_dataset(panel, factors, S, pre_dates, True)
    tr_data = _build_dataset(panel, factors, S, news_dates[:140], True)
    va_data = _build_dataset(panel, factors, S, news_dates[140:], True)

    wins = 0
    pairs = []
    for seed in range(5):
        cfg = NetworkConfig(
            d_model=16, d_emb=d_emb, n_factors=4, n_assets=30,
            n_hidden_layers=1, learning_rate=1e-3, batch_size=128, epochs=12, seed=seed,
        )
        warm = Network(cfg)
        pretrain(warm, pre_data, placeholder=np.zeros(d_emb))
        _, hist_w = train(warm, tr_data, va_data)
        cold = Network(cfg)
        _, hist_c = train(cold, tr_data, va_data)
        best_w = min(r["val_mse"] for r in hist_w)
        best_c = min(r["val_mse"] for r in hist_c)
        pairs.append((best_w, best_c))
        wins += best_w <= best_c
    assert wins >= 4
    elapsed = time.time() - t0
    assert elapsed < 600.0
    announce(8, f"pretraining wins {wins}/5 seeds (need >= 4) ({elapsed:.0f}s < 600s)")


def test_criterion_9_reproducibility(tmp_path):
    t0 = time.time()
    data = make_dataset(tmp_path)
    run1 = run_pipeline(
        pipeline_config(tmp_path, data, **{"paths.output_dir": str(tmp_path / "outA")}),
        through="evaluate",
    )
    run2 = run_pipeline(
        pipeline_config(tmp_path, data, **{"paths.output_dir": str(tmp_path / "outB")}),
        through="evaluate",
    )
    json_a = (run1 / "evaluate" / "report.json").read_bytes()
    json_b = (run2 / "evaluate" / "report.json").read_bytes()
    assert json_a == json_b
    assert (run1 / "evaluate" / "report.txt").read_bytes() == (
        run2 / "evaluate" / "report.txt"
    ).read_bytes()
    elapsed = time.time() - t0
    announce(9, f"two pipeline runs produced bit-identical EvalReports ({elapsed:.0f}s)")


def test_criterion_10_replay_fidelity(tmp_path):
    t0 = time.time()
    fixture = FIXTURES / "replay"
    keys = json.loads((fixture / "config.json").read_text())
    overrides = [f"{k}={v}" for k, v in keys.items()]
    overrides += [
        f"paths.data_dir={fixture / 'data'}",
        f"paths.output_dir={tmp_path / 'out'}",
        f"agent.transcript={fixture / 'transcript.jsonl'}",
    ]
    cfg = load_config(None, overrides)
    run_stage("ingest", cfg)
    run_stage("agent", cfg)
    run_stage("embed", cfg)
    run_dir = run_dir_for(cfg)

    assert (run_dir / "agent" / "reports.jsonl").read_bytes() == (
        fixture / "expected" / "reports.jsonl"
    ).read_bytes()
    assert (run_dir / "agent" / "notes.jsonl").read_bytes() == (
        fixture / "expected" / "notes.jsonl"
    ).read_bytes()
    daily = np.load(run_dir / "embed" / "daily.npz")
    expected_vectors = np.load(fixture / "expected" / "daily_vectors.npy")
    expected_dates = json.loads((fixture / "expected" / "daily_dates.json").read_text())
    assert daily["dates"].tolist() == expected_dates
    assert np.array_equal(daily["vectors"], expected_vectors)
    elapsed = time.time() - t0
    announce(
        10,
        f"transcript replay reproduced reports, notes, and daily embeddings "
        f"byte-identically ({elapsed:.0f}s)",
    )
