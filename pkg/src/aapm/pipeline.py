"""Stage orchestration: ingest -> agent -> embed -> pretrain -> train ->
predict -> portfolio -> evaluate -> report.

Each stage writes its artifacts under <output>/<run-id>/<stage>/ and drops
a .done marker; completed stages are skipped on re-runs unless forced.
Run ids are content hashes of the resolved configuration, so identical
configs share a directory and differing ones never collide.
"""

from __future__ import annotations

import csv
import json
import logging
from datetime import date, datetime, time as dtime
from importlib import resources
from pathlib import Path

import numpy as np

from . import agent as agent_mod
from . import embedding as emb_mod
from . import evaluation as eval_mod
from . import memory as mem_mod
from . import network as net_mod
from . import portfolio as port_mod
from .config import ConfigError, DependencyError, RunConfig
from .data import (
    FactorPanel,
    MarketCapSeries,
    ReturnPanel,
    SplitSpec,
    TradingCalendar,
    clean_factors,
    load_news,
    load_panels,
    rank_standardize,
    split,
)

__all__ = ["STAGES", "run_stage", "run_pipeline", "run_dir_for", "stage_done"]

log = logging.getLogger(__name__)

STAGES = [
    "ingest",
    "agent",
    "embed",
    "pretrain",
    "train",
    "predict",
    "portfolio",
    "evaluate",
    "report",
]


def stage_deps(name: str, cfg: RunConfig) -> list[str]:
    deps = {
        "ingest": [],
        "agent": ["ingest"],
        "embed": ["agent"],
        "pretrain": ["ingest", "embed"],
        "train": ["ingest", "embed"],
        "predict": ["ingest", "embed", "train"],
        "portfolio": ["ingest", "predict"],
        "evaluate": ["ingest", "portfolio"],
        "report": ["portfolio", "evaluate"],
    }[name]
    if name == "train" and cfg.get("flags", "pretrain"):
        deps = deps + ["pretrain"]
    return deps


def run_dir_for(cfg: RunConfig) -> Path:
    return Path(cfg.get("paths", "output_dir")) / cfg.run_id


def stage_done(cfg: RunConfig, name: str) -> bool:
    return (run_dir_for(cfg) / name / ".done").exists()


def _mark_done(run_dir: Path, name: str, extra: dict | None = None) -> None:
    payload = {"stage": name, "status": "ok"}
    payload.update(extra or {})
    (run_dir / name / ".done").write_text(json.dumps(payload, sort_keys=True))


def run_stage(
    name: str,
    cfg: RunConfig,
    force: bool = False,
    chat_backend=None,
    embedder=None,
) -> Path:
    """Run one stage (dependency-checked, resumable); returns the run dir."""
    if name not in STAGES:
        raise ConfigError(f"unknown stage {name!r}; expected one of {STAGES}")
    run_dir = run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved.json").write_text(cfg.resolved_json())
    for dep in stage_deps(name, cfg):
        if not stage_done(cfg, dep):
            raise DependencyError(f"stage {name!r} requires {dep!r}: run `aapm {_cli_name(dep)}` first")
    if stage_done(cfg, name) and not force:
        log.info("stage %s already complete in %s (use --force to redo)", name, run_dir)
        return run_dir
    stage_dir = run_dir / name
    stage_dir.mkdir(parents=True, exist_ok=True)
    fn = {
        "ingest": _stage_ingest,
        "agent": _stage_agent,
        "embed": _stage_embed,
        "pretrain": _stage_pretrain,
        "train": _stage_train,
        "predict": _stage_predict,
        "portfolio": _stage_portfolio,
        "evaluate": _stage_evaluate,
        "report": _stage_report,
    }[name]
    if name == "agent":
        fn(cfg, run_dir, chat_backend=chat_backend, embedder=embedder)
    elif name == "embed":
        fn(cfg, run_dir, embedder=embedder)
    else:
        fn(cfg, run_dir)
    _mark_done(run_dir, name)
    return run_dir


def _cli_name(stage: str) -> str:
    return "agent-run" if stage == "agent" else stage


def run_pipeline(
    cfg: RunConfig,
    force: bool = False,
    through: str = "evaluate",
    chat_backend=None,
    embedder=None,
) -> Path:
    """Run stages in order up to and including `through`."""
    last = STAGES.index(through)
    run_dir = run_dir_for(cfg)
    for name in STAGES[: last + 1]:
        run_dir = run_stage(name, cfg, force=force, chat_backend=chat_backend, embedder=embedder)
    return run_dir


# ---------------------------------------------------------------------------
# shared helpers


def build_embedder(cfg: RunConfig, run_dir: Path):
    kind = cfg.get("embedding", "backend")
    dim = cfg.get("embedding", "dim")
    seed = cfg.get("embedding", "mock_seed")
    if kind == "mock":
        backend = emb_mod.MockEmbeddingBackend(dim=dim, seed=seed)
    elif kind == "remote":
        import os

        url = os.environ.get(emb_mod.EMB_URL_ENV)
        if not url:
            raise ConfigError(f"[embedding] backend=remote requires {emb_mod.EMB_URL_ENV}")
        backend = emb_mod.RemoteEmbeddingBackend(url, api_key=os.environ.get(emb_mod.EMB_KEY_ENV, ""))
    else:
        backend = emb_mod.backend_from_env(dim=dim, seed=seed)
    cache_dir = cfg.get("paths", "cache_dir") or str(Path(cfg.get("paths", "output_dir")) / "cache")
    cache_path = Path(cache_dir) / "embeddings.jsonl"
    return emb_mod.EmbeddingCache(backend, cache_path)


def build_chat_backend(cfg: RunConfig, prompts: agent_mod.PromptSet):
    transcript = cfg.get("agent", "transcript")
    model = cfg.get("agent", "model")
    temperature = cfg.get("agent", "temperature")
    if transcript.startswith("record:"):
        inner = agent_mod.chat_backend_from_env(prompts, model=model, temperature=temperature)
        return agent_mod.TranscriptRecorder(inner, transcript[len("record:") :])
    if transcript:
        return agent_mod.ReplayBackend(transcript, model=model, temperature=temperature)
    return agent_mod.chat_backend_from_env(prompts, model=model, temperature=temperature)


def _data_path(cfg: RunConfig, key: str) -> Path:
    return Path(cfg.get("paths", "data_dir")) / cfg.get("data", key)


def _placeholder_vector(cfg: RunConfig, embedder) -> np.ndarray:
    text = cfg.get("embedding", "placeholder_text")
    if text:
        return embedder.embed_text(text)
    return np.zeros(embedder.dim)


def load_ingested(run_dir: Path) -> tuple[ReturnPanel, FactorPanel, MarketCapSeries]:
    blob = np.load(run_dir / "ingest" / "panels.npz", allow_pickle=False)
    calendar = TradingCalendar(tuple(date.fromisoformat(s) for s in blob["dates"]))
    permnos = tuple(int(p) for p in blob["permnos"])
    returns = ReturnPanel(calendar, permnos, blob["returns"], blob["mask"])
    factors = FactorPanel(
        calendar,
        permnos,
        blob["factor_values"],
        blob["factor_staleness"],
        tuple(str(n) for n in blob["factor_names"]),
    )
    caps = MarketCapSeries(calendar, permnos, blob["caps"])
    return returns, factors, caps


def _split_spec(cfg: RunConfig) -> SplitSpec:
    vals = {}
    for key in ("train_end", "val_end", "test_end"):
        raw = cfg.get("split", key)
        if not raw:
            raise ConfigError(f"[split] {key} must be set")
        try:
            vals[key] = date.fromisoformat(raw)
        except ValueError:
            raise ConfigError(f"[split] {key}: bad date {raw!r}") from None
    return SplitSpec(**vals)


def _load_smoothed(run_dir: Path) -> tuple[list[date], np.ndarray]:
    blob = np.load(run_dir / "embed" / "smoothed.npz", allow_pickle=False)
    dates = [date.fromisoformat(s) for s in blob["dates"]]
    return dates, blob["S"]


def _cleaned_factors(cfg: RunConfig, factors: FactorPanel) -> FactorPanel:
    cleaned = clean_factors(factors)
    if cfg.get("data", "rank_standardize"):
        cleaned = rank_standardize(cleaned)
    return cleaned


def _build_dataset(
    panel: ReturnPanel,
    factors: FactorPanel,
    S: np.ndarray,
    dates: list[date],
    use_factors: bool,
) -> net_mod.Dataset:
    """Samples (d, a) with d and d+1 inside `dates` and both days active."""
    cal = panel.calendar.dates
    idx = {d: i for i, d in enumerate(cal)}
    wanted = set(dates)
    rows_S, rows_V, rows_A, rows_y = [], [], [], []
    for d in dates:
        i = idx[d]
        if i + 1 >= len(cal) or cal[i + 1] not in wanted:
            continue
        active = panel.mask[i] & panel.mask[i + 1]
        for j in np.where(active)[0]:
            rows_S.append(S[i])
            if use_factors:
                rows_V.append(factors.values[i, j])
            rows_A.append(j)
            rows_y.append(panel.excess_returns[i + 1, j])
    if not rows_y:
        return net_mod.Dataset(
            np.zeros((0, S.shape[1])),
            np.zeros((0, factors.n_factors)) if use_factors else None,
            np.zeros(0, dtype=np.int64),
            np.zeros(0),
        )
    return net_mod.Dataset(
        np.asarray(rows_S),
        np.asarray(rows_V) if use_factors else None,
        np.asarray(rows_A, dtype=np.int64),
        np.asarray(rows_y),
    )


def _network_config(cfg: RunConfig, d_emb: int, n_assets: int, n_factors: int) -> net_mod.NetworkConfig:
    return net_mod.NetworkConfig(
        d_model=cfg.get("network", "d_model"),
        d_emb=d_emb,
        n_factors=n_factors,
        n_assets=n_assets,
        n_hidden_layers=cfg.get("network", "n_hidden_layers"),
        dropout_rate=cfg.get("network", "dropout_rate"),
        learning_rate=cfg.get("network", "learning_rate"),
        batch_size=cfg.get("network", "batch_size"),
        epochs=cfg.get("network", "epochs"),
        seed=cfg.seed,
        use_factors=cfg.get("flags", "use_factors"),
        use_asset_emb=cfg.get("flags", "use_asset_emb"),
        batchnorm=cfg.get("network", "batchnorm"),
    )


def _write_history(path: Path, history: list[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_mse", "val_mse"])
        for row in history:
            writer.writerow(
                [row["epoch"], repr(row["train_mse"]), repr(row["val_mse"]) if "val_mse" in row else ""]
            )


# ---------------------------------------------------------------------------
# stages


def _stage_ingest(cfg: RunConfig, run_dir: Path) -> None:
    returns, factors, caps = load_panels(
        _data_path(cfg, "returns"),
        _data_path(cfg, "factors"),
        _data_path(cfg, "caps"),
        returns_scale=cfg.get("data", "returns_scale"),
        factors_scale=cfg.get("data", "factors_scale"),
    )
    out = run_dir / "ingest"
    np.savez(
        out / "panels.npz",
        dates=np.array([d.isoformat() for d in returns.calendar.dates]),
        permnos=np.array(returns.permnos, dtype=np.int64),
        returns=returns.excess_returns,
        mask=returns.mask,
        factor_values=factors.values,
        factor_staleness=factors.staleness,
        factor_names=np.array(factors.factor_names),
        caps=caps.caps,
    )
    log.info(
        "ingested %d dates x %d assets x %d factors",
        len(returns.calendar),
        len(returns.permnos),
        factors.n_factors,
    )


def _stage_agent(cfg: RunConfig, run_dir: Path, chat_backend=None, embedder=None) -> None:
    panel, _, _ = load_ingested(run_dir)
    prompts = agent_mod.PromptSet.bundled()
    if embedder is None:
        embedder = build_embedder(cfg, run_dir)
    if chat_backend is None:
        chat_backend = build_chat_backend(cfg, prompts)

    items = load_news(_data_path(cfg, "news"))
    items = agent_mod.filter_blocklist(items, cfg.blocklist())
    cal_start, cal_end = panel.calendar.dates[0], panel.calendar.dates[-1]
    in_range = [it for it in items if cal_start <= it.timestamp.date() <= cal_end]
    if len(in_range) < len(items):
        log.warning("dropped %d news items outside the panel calendar", len(items) - len(in_range))
    items = in_range

    note_file = cfg.get("agent", "initial_note_file")
    note_text = Path(note_file).read_text(encoding="utf-8") if note_file else prompts.initial_note
    agent_cfg = agent_mod.AgentConfig(
        n_rounds=cfg.get("agent", "n_rounds"),
        top_k=cfg.get("agent", "top_k"),
        skip_enabled=cfg.get("agent", "skip_enabled"),
        refine_enabled=cfg.get("flags", "refine"),
        notes_enabled=cfg.get("flags", "notes"),
        use_memory=cfg.get("flags", "use_memory"),
        allow_repeat_retrieval=cfg.get("agent", "allow_repeat_retrieval"),
        category_blocklist=cfg.blocklist(),
    )

    corpus_dir = cfg.get("paths", "corpus_dir")
    if agent_cfg.use_memory:
        if corpus_dir:
            store = mem_mod.ingest_corpus(
                corpus_dir,
                embedder,
                max_chars=cfg.get("agent", "max_chars"),
                overlap_chars=cfg.get("agent", "overlap_chars"),
            )
        else:
            with resources.as_file(resources.files("aapm") / "corpus") as bundled:
                store = mem_mod.ingest_corpus(
                    bundled,
                    embedder,
                    max_chars=cfg.get("agent", "max_chars"),
                    overlap_chars=cfg.get("agent", "overlap_chars"),
                )
    else:
        store = mem_mod.MemoryStore(dimension=embedder.dim)

    first_day = items[0].timestamp.date() if items else cal_start
    state = agent_mod.AgentState(
        note=agent_mod.Note(text=note_text, as_of=datetime.combine(first_day, dtime.min)),
        store=store,
    )
    runtime = agent_mod.AgentRuntime(chat=chat_backend, embedder=embedder, cfg=agent_cfg, prompts=prompts)

    by_day: dict[date, list] = {}
    for it in items:
        by_day.setdefault(it.timestamp.date(), []).append(it)

    out = run_dir / "agent"
    all_reports = []
    notes_log = [{"as_of": state.note.as_of.isoformat(), "text": state.note.text}]
    for d in sorted(by_day):
        reports, state = agent_mod.run_day(by_day[d], state, runtime)
        all_reports.extend(reports)
        notes_log.append({"as_of": state.note.as_of.isoformat(), "text": state.note.text})

    with (out / "reports.jsonl").open("w", encoding="utf-8") as fh:
        for r in all_reports:
            fh.write(
                json.dumps(
                    {
                        "news_id": r.news_id,
                        "round": r.round,
                        "text": r.text,
                        "retrieved_ids": [list(ids) for ids in r.retrieved_ids],
                        "skipped": r.skipped,
                        "failed": r.failed,
                        "timestamp": r.timestamp.isoformat(),
                    }
                )
                + "\n"
            )
    with (out / "notes.jsonl").open("w", encoding="utf-8") as fh:
        for row in notes_log:
            fh.write(json.dumps(row) + "\n")
    state.store.save(out / "memory")
    meta = {
        "backend": chat_backend.run_metadata(),
        "prompt_version": prompts.version,
        "n_items": len(items),
        "n_final": sum(1 for r in all_reports if r.final),
        "n_skipped": sum(1 for r in all_reports if r.skipped),
        "n_failed": sum(1 for r in all_reports if r.failed),
        "calls": {k: chat_backend.calls.count(k) for k in sorted(set(chat_backend.calls))},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _stage_embed(cfg: RunConfig, run_dir: Path, embedder=None) -> None:
    if embedder is None:
        embedder = build_embedder(cfg, run_dir)
    panel, _, _ = load_ingested(run_dir)
    placeholder = _placeholder_vector(cfg, embedder)

    reports_by_day: dict[date, list] = {}
    with (run_dir / "agent" / "reports.jsonl").open("r", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            ts = datetime.fromisoformat(row["timestamp"])
            reports_by_day.setdefault(ts.date(), [])
            if not row["skipped"] and not row["failed"]:
                reports_by_day[ts.date()].append((ts, row["text"]))

    dailies: list[emb_mod.DailyEmbedding] = []
    for d in sorted(reports_by_day):
        pairs = [(ts, embedder.embed_text(text)) for ts, text in reports_by_day[d]]
        dailies.append(
            emb_mod.daily_average(pairs, d, dim=embedder.dim, placeholder=placeholder)
        )

    smoother = emb_mod.SmootherConfig(
        window=cfg.get("smoother", "window"), eta=cfg.get("smoother", "eta")
    )
    cal = panel.calendar.dates
    S = np.zeros((len(cal), embedder.dim))
    has_history = np.zeros(len(cal), dtype=bool)
    n_fallback = 0
    for i, d in enumerate(cal):
        history = [e for e in dailies if e.date <= d]
        if history:
            S[i] = emb_mod.smooth(dailies, d, smoother)
            has_history[i] = True
        else:
            S[i] = placeholder
            n_fallback += 1
    if n_fallback:
        log.info("%d dates precede all news and use the placeholder state", n_fallback)

    out = run_dir / "embed"
    np.savez(
        out / "daily.npz",
        dates=np.array([e.date.isoformat() for e in dailies]),
        vectors=np.stack([e.vector for e in dailies]) if dailies else np.zeros((0, embedder.dim)),
        n_reports=np.array([e.n_reports for e in dailies], dtype=np.int64),
    )
    np.savez(
        out / "smoothed.npz",
        dates=np.array([d.isoformat() for d in cal]),
        S=S,
        has_history=has_history,
    )
    meta = {
        "d_emb": embedder.dim,
        "backend_signature": embedder.signature(),
        "placeholder": placeholder.tolist(),
        "n_news_days": len(dailies),
        "first_news_date": dailies[0].date.isoformat() if dailies else None,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _stage_pretrain(cfg: RunConfig, run_dir: Path) -> None:
    out = run_dir / "pretrain"
    if not cfg.get("flags", "pretrain"):
        (out / "meta.json").write_text(json.dumps({"skipped": True}))
        return
    panel, factors, _ = load_ingested(run_dir)
    factors = _cleaned_factors(cfg, factors)
    embed_meta = json.loads((run_dir / "embed" / "meta.json").read_text())
    d_emb = embed_meta["d_emb"]
    placeholder = np.asarray(embed_meta["placeholder"], dtype=np.float64)
    first_news = embed_meta["first_news_date"]
    cal = panel.calendar.dates
    if first_news is None:
        log.warning("no news days found; skipping pretraining")
        (out / "meta.json").write_text(json.dumps({"skipped": True, "reason": "no news"}))
        return
    cutoff = date.fromisoformat(first_news)
    pre_dates = [d for d in cal if d < cutoff]
    _, smoothed = _load_smoothed(run_dir)
    data = _build_dataset(panel, factors, smoothed, pre_dates, cfg.get("flags", "use_factors"))
    net_cfg = _network_config(cfg, d_emb, len(panel.permnos), factors.n_factors)
    net = net_mod.Network(net_cfg)
    epochs = cfg.get("network", "pretrain_epochs") or None
    history = net_mod.pretrain(net, data, placeholder, epochs=epochs)
    net_mod.save_checkpoint(net, out / "checkpoint", epoch=len(history))
    _write_history(out / "history.csv", history)
    (out / "meta.json").write_text(
        json.dumps({"skipped": False, "n_samples": len(data), "epochs": len(history)}, sort_keys=True)
    )


def _stage_train(cfg: RunConfig, run_dir: Path) -> None:
    panel, factors, _ = load_ingested(run_dir)
    factors = _cleaned_factors(cfg, factors)
    embed_meta = json.loads((run_dir / "embed" / "meta.json").read_text())
    d_emb = embed_meta["d_emb"]
    _, smoothed = _load_smoothed(run_dir)
    spec = _split_spec(cfg)
    train_range, val_range, _ = split(panel.calendar, spec)
    use_factors = cfg.get("flags", "use_factors")
    # pre-news history is pretraining material; the training set proper
    # starts where news coverage does
    first_news = embed_meta["first_news_date"]
    train_dates = list(train_range.dates)
    if first_news is not None:
        cutoff = date.fromisoformat(first_news)
        train_dates = [d for d in train_dates if d >= cutoff]
    train_data = _build_dataset(panel, factors, smoothed, train_dates, use_factors)
    val_data = _build_dataset(panel, factors, smoothed, list(val_range.dates), use_factors)
    if len(train_data) == 0 or len(val_data) == 0:
        raise ConfigError("train/validation ranges produced no samples; check [split] dates")

    pretrained = cfg.get("flags", "pretrain")
    if pretrained:
        pre_meta = json.loads((run_dir / "pretrain" / "meta.json").read_text())
        if pre_meta.get("skipped"):
            pretrained = False
    if pretrained:
        net = net_mod.load_checkpoint(run_dir / "pretrain" / "checkpoint")
    else:
        net = net_mod.Network(_network_config(cfg, d_emb, len(panel.permnos), factors.n_factors))

    _, history = net_mod.train(net, train_data, val_data)
    best = min((row["val_mse"] for row in history), default=float("nan"))
    out = run_dir / "train"
    net_mod.save_checkpoint(
        net,
        out / "checkpoint",
        epoch=len(history),
        metrics={"best_val_mse": best},
    )
    _write_history(out / "history.csv", history)
    (out / "meta.json").write_text(
        json.dumps(
            {
                "n_train": len(train_data),
                "n_val": len(val_data),
                "best_val_mse": best,
                "pretrained": pretrained,
            },
            sort_keys=True,
        )
    )


def _stage_predict(cfg: RunConfig, run_dir: Path) -> None:
    panel, factors, _ = load_ingested(run_dir)
    factors = _cleaned_factors(cfg, factors)
    _, smoothed = _load_smoothed(run_dir)
    net = net_mod.load_checkpoint(run_dir / "train" / "checkpoint")
    spec = _split_spec(cfg)
    _, val_range, test_range = split(panel.calendar, spec)
    use_factors = cfg.get("flags", "use_factors")
    cal = panel.calendar.dates
    idx = {d: i for i, d in enumerate(cal)}
    out = run_dir / "predict"
    with (out / "predictions.csv").open("w", encoding="utf-8", newline="") as fh:
        fh.write("date,permno,pred\n")
        for d in list(val_range.dates) + list(test_range.dates):
            i = idx[d]
            cols = np.where(panel.mask[i])[0]
            if cols.size == 0:
                continue
            S = np.tile(smoothed[i], (cols.size, 1))
            V = factors.values[i, cols] if use_factors else None
            preds = net.predict(S, V, cols)
            for j, p in zip(cols, preds):
                fh.write(f"{d.isoformat()},{panel.permnos[j]},{float(p)!r}\n")


def _load_predictions(run_dir: Path) -> dict[date, dict[int, float]]:
    preds: dict[date, dict[int, float]] = {}
    with (run_dir / "predict" / "predictions.csv").open("r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            d_s, p_s, v_s = line.strip().split(",")
            preds.setdefault(date.fromisoformat(d_s), {})[int(p_s)] = float(v_s)
    return preds


def _write_returns_csv(path: Path, series: port_mod.PortfolioReturns) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write("date,ret\n")
        for d, r in zip(series.dates, series.returns):
            fh.write(f"{d.isoformat()},{float(r)!r}\n")


def _read_returns_csv(path: Path) -> tuple[list[date], np.ndarray]:
    dates, rets = [], []
    with path.open("r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            d_s, r_s = line.strip().split(",")
            dates.append(date.fromisoformat(d_s))
            rets.append(float(r_s))
    return dates, np.asarray(rets)


def _stage_portfolio(cfg: RunConfig, run_dir: Path) -> None:
    panel, _, caps = load_ingested(run_dir)
    preds = _load_predictions(run_dir)
    pred_dates = sorted(preds)
    tp_window = cfg.get("portfolio", "tp_window")
    col = {p: j for j, p in enumerate(panel.permnos)}
    cal_idx = {d: i for i, d in enumerate(panel.calendar.dates)}

    tp_weights: dict[date, dict[int, float]] = {}
    ew_weights: dict[date, dict[int, float]] = {}
    vw_weights: dict[date, dict[int, float]] = {}
    for pos, d in enumerate(pred_dates):
        window_dates = pred_dates[max(0, pos - tp_window + 1) : pos + 1]
        if len(window_dates) >= 2:
            assets = sorted({p for wd in window_dates for p in preds[wd]})
            matrix = np.full((len(window_dates), len(assets)), np.nan)
            for r, wd in enumerate(window_dates):
                for c, p in enumerate(assets):
                    if p in preds[wd]:
                        matrix[r, c] = preds[wd][p]
            ok = np.sum(~np.isnan(matrix), axis=0) >= 2
            if ok.sum() >= 1:
                kept = [a for a, keep in zip(assets, ok) if keep]
                weights = port_mod.tangency_weights(matrix[:, ok])
                tp_weights[d] = {p: float(w) for p, w in zip(kept, weights)}
        day_preds = preds[d]
        if len(day_preds) >= 10:
            assign = port_mod.decile_assign(day_preds)
            i = cal_idx[d]
            day_caps = {
                p: float(caps.caps[i, col[p]])
                for p in day_preds
                if p in col and np.isfinite(caps.caps[i, col[p]])
            }
            ew_weights[d] = port_mod.ls_weights(assign, "ew")
            vw_weights[d] = port_mod.ls_weights(assign, "vw", caps=day_caps)

    out = run_dir / "portfolio"
    with (out / "weights.csv").open("w", encoding="utf-8", newline="") as fh:
        fh.write("date,permno,weight,kind\n")
        for kind, series in (("tangency", tp_weights), ("ew_ls", ew_weights), ("vw_ls", vw_weights)):
            for d in sorted(series):
                for p in sorted(series[d]):
                    fh.write(f"{d.isoformat()},{p},{series[d][p]!r},{kind}\n")

    for kind, series in (("tp", tp_weights), ("ew", ew_weights), ("vw", vw_weights)):
        realized = port_mod.realize(series, panel)
        realized.kind = kind
        _write_returns_csv(out / f"returns_{kind}.csv", realized)

    deciles = port_mod.decile_series(preds, panel)
    for k, series in deciles.items():
        _write_returns_csv(out / f"returns_decile_{k}.csv", series)


def _market_factor(
    panel: ReturnPanel, caps: MarketCapSeries, realization_dates: list[date]
) -> np.ndarray:
    cal_idx = {d: i for i, d in enumerate(panel.calendar.dates)}
    out = []
    for r in realization_dates:
        i = cal_idx[r]
        active = panel.mask[i] & panel.mask[i - 1] if i > 0 else panel.mask[i]
        w = np.where(active, caps.caps[max(i - 1, 0)], np.nan)
        ok = active & np.isfinite(w)
        total = np.nansum(np.where(ok, w, 0.0))
        if total <= 0:
            out.append(0.0)
        else:
            out.append(float(np.nansum(np.where(ok, w * panel.excess_returns[i], 0.0)) / total))
    return np.asarray(out)


def _stage_evaluate(cfg: RunConfig, run_dir: Path) -> None:
    panel, factors, caps = load_ingested(run_dir)
    factors = _cleaned_factors(cfg, factors)
    spec = _split_spec(cfg)
    _, val_range, test_range = split(panel.calendar, spec)
    out = run_dir / "evaluate"
    periods = cfg.get("portfolio", "annualization")

    portfolio_test: dict[str, np.ndarray] = {}
    portfolio_val: dict[str, np.ndarray] = {}
    test_dates_by_kind: dict[str, list[date]] = {}
    for kind in ("tp", "ew", "vw"):
        dates, rets = _read_returns_csv(run_dir / "portfolio" / f"returns_{kind}.csv")
        in_test = [k for k, d in enumerate(dates) if d in test_range]
        in_val = [k for k, d in enumerate(dates) if d in val_range]
        portfolio_test[kind] = rets[in_test]
        portfolio_val[kind] = rets[in_val]
        test_dates_by_kind[kind] = [dates[k] for k in in_test]

    realization_dates = test_dates_by_kind["tp"]
    formation = []
    cal_idx = {d: i for i, d in enumerate(panel.calendar.dates)}
    for r in realization_dates:
        formation.append(panel.calendar.dates[cal_idx[r] - 1])

    anomalies = eval_mod.characteristic_portfolios(
        factors, panel, formation, n_quantiles=cfg.get("portfolio", "n_anomaly_quantiles")
    )
    T = len(realization_dates)
    anomalies = {k: v for k, v in anomalies.items() if len(v) == T}
    if not anomalies:
        raise ConfigError("no characteristic portfolios could be formed over the test range")

    factor_cols = []
    for name in cfg.alpha_factor_names():
        if name == "tangency":
            factor_cols.append(portfolio_test["tp"])
        elif name == "market":
            factor_cols.append(_market_factor(panel, caps, realization_dates))
    model_factors = np.column_stack(factor_cols)

    report = eval_mod.evaluate_run(portfolio_test, anomalies, model_factors, periods_per_year=periods)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(eval_mod.format_report_table(report) + "\n")

    objectives = {
        "ew_sharpe_val": eval_mod.sharpe(portfolio_val["ew"], 0.0, periods) if len(portfolio_val["ew"]) >= 2 else None,
        "ew_sharpe_test": report.sharpe["ew"],
        "tp_sharpe_test": report.sharpe["tp"],
        "avg_abs_alpha": report.avg_abs_alpha,
    }
    train_meta_path = run_dir / "train" / "meta.json"
    if train_meta_path.exists():
        objectives["best_val_mse"] = json.loads(train_meta_path.read_text())["best_val_mse"]
    (out / "objectives.json").write_text(json.dumps(objectives, indent=2, sort_keys=True))


def _stage_report(cfg: RunConfig, run_dir: Path) -> None:
    from . import plots

    spec = _split_spec(cfg)
    panel, _, _ = load_ingested(run_dir)
    _, _, test_range = split(panel.calendar, spec)
    out = run_dir / "report"

    curves = {}
    for kind in ("tp", "ew", "vw"):
        dates, rets = _read_returns_csv(run_dir / "portfolio" / f"returns_{kind}.csv")
        keep = [k for k, d in enumerate(dates) if d in test_range]
        curves[kind] = ([dates[k] for k in keep], np.cumprod(1.0 + rets[keep]) - 1.0)
    plots.equity_curves(curves, out / "equity_curves.svg")

    decile_curves = {}
    terminal = {}
    for k in range(1, 11):
        path = run_dir / "portfolio" / f"returns_decile_{k}.csv"
        if not path.exists():
            continue
        dates, rets = _read_returns_csv(path)
        keep = [i for i, d in enumerate(dates) if d in test_range]
        cum = np.cumprod(1.0 + rets[keep]) - 1.0
        decile_curves[k] = ([dates[i] for i in keep], cum)
        terminal[k] = float(cum[-1]) if len(cum) else float("nan")
    plots.decile_curves(decile_curves, out / "decile_cumulative.svg")

    report = json.loads((run_dir / "evaluate" / "report.json").read_text())
    with (out / "report.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for kind in sorted(report["sharpe"]):
            writer.writerow([f"sharpe_{kind}", repr(report["sharpe"][kind])])
        for kind in sorted(report["mdd"]):
            writer.writerow([f"mdd_{kind}", repr(report["mdd"][kind])])
        for key in ("avg_abs_alpha", "avg_abs_t", "frac_t_gt_196", "grs_stat", "grs_pvalue"):
            writer.writerow([key, repr(report[key])])
    with (out / "decile_terminal.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["decile", "terminal_cumulative"])
        for k in sorted(terminal):
            writer.writerow([k, repr(terminal[k])])
