"""Random hyperparameter search and the analysis depth/width grid.

The default search space mirrors the engine's tuning table: categorical
sets for the architecture sizes, uniform draws for dropout and the decay
coefficient, and a log-uniform draw for batch size. Each trial runs the
full pipeline under its own derived config (own run directory, own seed)
and scores the objective on the validation range.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .pipeline import run_dir_for, run_pipeline

__all__ = ["Distribution", "SweepSpec", "default_space", "sweep", "nk_grid"]

log = logging.getLogger(__name__)

# parameter name -> (section, key) in the run config
PARAM_KEYS = {
    "learning_rate": ("network", "learning_rate"),
    "d_model": ("network", "d_model"),
    "d_emb": ("embedding", "dim"),
    "epochs": ("network", "epochs"),
    "hidden_layers": ("network", "n_hidden_layers"),
    "dropout_rate": ("network", "dropout_rate"),
    "batch_size": ("network", "batch_size"),
    "eta": ("smoother", "eta"),
    "window": ("smoother", "window"),
    "n_rounds": ("agent", "n_rounds"),
    "top_k": ("agent", "top_k"),
}

OBJECTIVES = {"ew_sharpe_val", "ew_sharpe_test", "tp_sharpe_test", "avg_abs_alpha", "best_val_mse"}


@dataclass(frozen=True)
class Distribution:
    """choice:<v1,v2,...> | uniform:<a,b> | log_uniform:<a,b,base>"""

    kind: str
    values: tuple

    @classmethod
    def parse(cls, text: str) -> "Distribution":
        if ":" not in text:
            raise ConfigError(f"bad distribution {text!r}")
        kind, payload = text.split(":", 1)
        kind = kind.strip()
        parts = [p.strip() for p in payload.split(",") if p.strip()]
        if kind == "choice":
            if not parts:
                raise ConfigError(f"choice distribution needs values: {text!r}")
            return cls("choice", tuple(_parse_scalar(p) for p in parts))
        if kind == "uniform":
            if len(parts) != 2:
                raise ConfigError(f"uniform needs two bounds: {text!r}")
            return cls("uniform", (float(parts[0]), float(parts[1])))
        if kind == "log_uniform":
            if len(parts) != 3:
                raise ConfigError(f"log_uniform needs low, high, base: {text!r}")
            return cls("log_uniform", (float(parts[0]), float(parts[1]), float(parts[2])))
        raise ConfigError(f"unknown distribution kind {kind!r}")

    def sample(self, rng: np.random.Generator):
        if self.kind == "choice":
            return self.values[int(rng.integers(len(self.values)))]
        if self.kind == "uniform":
            return float(rng.uniform(self.values[0], self.values[1]))
        low, high, base = self.values
        exponent = rng.uniform(np.log(low) / np.log(base), np.log(high) / np.log(base))
        value = float(base**exponent)
        if float(low).is_integer() and float(high).is_integer():
            return int(round(value))
        return value


def _parse_scalar(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def default_space() -> dict[str, Distribution]:
    """The engine's standard search table."""
    return {
        "learning_rate": Distribution("choice", (1e-3, 1e-4, 5e-4, 5e-3)),
        "d_model": Distribution("choice", (128, 256, 512, 768, 1024)),
        "d_emb": Distribution("choice", (128, 256, 512, 768, 1024)),
        "epochs": Distribution("choice", (50, 100, 150, 200)),
        "hidden_layers": Distribution("choice", (0, 1, 2, 3, 4, 5)),
        "dropout_rate": Distribution("uniform", (0.0, 0.3)),
        "batch_size": Distribution("log_uniform", (32.0, 1024.0, 8.0)),
        "eta": Distribution("uniform", (0.9, 1.0)),
        "window": Distribution("choice", (1, 7, 15, 30, 45, 60, 90, 180)),
        "n_rounds": Distribution("choice", (1, 2, 3, 4, 5)),
        "top_k": Distribution("choice", (1, 2, 3, 4, 5)),
    }


@dataclass
class SweepSpec:
    params: dict[str, Distribution]
    objective: str = "ew_sharpe_val"
    budget: int = 30

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ConfigError("sweep budget must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; expected one of {sorted(OBJECTIVES)}")
        for name in self.params:
            if name not in PARAM_KEYS:
                raise ConfigError(f"unknown sweep parameter {name!r}; expected one of {sorted(PARAM_KEYS)}")

    @classmethod
    def from_file(cls, path: str | Path) -> "SweepSpec":
        """Sweep spec file: JSON {objective, budget, params: {name: "dist"}}."""
        raw = json.loads(Path(path).read_text())
        params = {name: Distribution.parse(text) for name, text in raw.get("params", {}).items()}
        return cls(
            params=params or default_space(),
            objective=raw.get("objective", "ew_sharpe_val"),
            budget=int(raw.get("budget", 30)),
        )


def _trial_config(base: RunConfig, assignment: dict, trial_seed: int) -> RunConfig:
    cfg = base.copy()
    for name, value in assignment.items():
        section, key = PARAM_KEYS[name]
        cfg.set(section, key, value)
    cfg.set("run", "seed", trial_seed)
    return cfg


def _objective_value(cfg: RunConfig, objective: str) -> float:
    path = run_dir_for(cfg) / "evaluate" / "objectives.json"
    value = json.loads(path.read_text()).get(objective)
    if value is None:
        raise ConfigError(f"objective {objective!r} unavailable for this run")
    return float(value)


def _run_trial(base: RunConfig, assignment: dict, trial_seed: int, objective: str, force: bool) -> float:
    cfg = _trial_config(base, assignment, trial_seed)
    run_pipeline(cfg, force=force, through="evaluate")
    return _objective_value(cfg, objective)


def sweep(
    base: RunConfig,
    spec: SweepSpec,
    out_dir: str | Path,
    force: bool = False,
) -> dict:
    """Random search; writes trials.csv and best.json, returns the best row.

    Lower-is-better objectives (pricing error, validation MSE) are
    minimized; Sharpe objectives are maximized.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=base.seed, spawn_key=(99,)))
    minimize = spec.objective in {"avg_abs_alpha", "best_val_mse"}
    names = sorted(spec.params)
    rows = []
    best = None
    for trial in range(spec.budget):
        assignment = {name: spec.params[name].sample(rng) for name in names}
        # trials share the base pipeline seed so cells differ only in the
        # sampled parameters; identical assignments cache to the same run
        trial_seed = base.seed
        value = _run_trial(base, assignment, trial_seed, spec.objective, force)
        row = {"trial": trial, "seed": trial_seed, **assignment, spec.objective: value}
        rows.append(row)
        if best is None or (minimize and value < best[spec.objective]) or (
            not minimize and value > best[spec.objective]
        ):
            best = row
        log.info("trial %d/%d: %s = %s", trial + 1, spec.budget, spec.objective, value)

    with (out_dir / "trials.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "seed", *names, spec.objective])
        for row in rows:
            writer.writerow([row["trial"], row["seed"], *[row[n] for n in names], repr(row[spec.objective])])
    (out_dir / "best.json").write_text(json.dumps(best, indent=2, sort_keys=True, default=str))
    return best


def nk_grid(
    base: RunConfig,
    out_dir: str | Path,
    n_values: tuple[int, ...] = (1, 2, 3, 4, 5),
    k_values: tuple[int, ...] = (1, 2, 3, 4, 5),
    objective: str = "ew_sharpe_val",
    force: bool = False,
) -> dict[tuple[int, int], float]:
    """Exhaustive analysis depth (rounds) x width (top-k) grid.

    Emits grid.csv with rounds as rows and top-k as columns, plus the flat
    trials.csv. Every cell reuses the base seed so cells differ only in
    the swept parameters.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[tuple[int, int], float] = {}
    rows = []
    for trial, (n, k) in enumerate((n, k) for n in n_values for k in k_values):
        assignment = {"n_rounds": n, "top_k": k}
        value = _run_trial(base, assignment, base.seed, objective, force)
        results[(n, k)] = value
        rows.append({"trial": trial, "n_rounds": n, "top_k": k, objective: value})
        log.info("grid N=%d K=%d: %s = %s", n, k, objective, value)
    with (out_dir / "grid.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_rounds \\ top_k", *k_values])
        for n in n_values:
            writer.writerow([n, *[repr(results[(n, k)]) for k in k_values]])
    with (out_dir / "trials.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "n_rounds", "top_k", objective])
        for row in rows:
            writer.writerow([row["trial"], row["n_rounds"], row["top_k"], repr(row[objective])])
    return results
