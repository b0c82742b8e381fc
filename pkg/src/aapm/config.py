"""Run configuration: INI file + CLI overrides -> one resolved, hashed dict.

Every stage runs from a RunConfig; the resolved form is serialized into
the run directory and its content hash (excluding the output root) is the
run id, which makes stage caching sound and reruns reproducible.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import json
from pathlib import Path

__all__ = ["ConfigError", "DependencyError", "RunConfig", "load_config", "DEFAULTS"]


class ConfigError(Exception):
    """Invalid configuration (exit code 2)."""


class DependencyError(Exception):
    """A required pipeline stage has not been run (exit code 3)."""


DEFAULTS: dict[str, dict] = {
    "paths": {
        "data_dir": "data",
        "corpus_dir": "",  # empty -> bundled stand-in corpus
        "cache_dir": "",  # empty -> <output_dir>/cache, shared across runs
        "output_dir": "output",
    },
    "data": {
        "returns": "returns.csv",
        "factors": "factors.csv",
        "caps": "caps.csv",
        "news": "news.jsonl",
        "returns_scale": 1.0,
        "factors_scale": 1.0,
        "rank_standardize": False,
    },
    "split": {
        "train_end": "",
        "val_end": "",
        "test_end": "",
    },
    "embedding": {
        "backend": "auto",  # auto | mock | remote
        "dim": 32,
        "mock_seed": 0,
        "placeholder_text": "",  # empty -> all-zeros placeholder
    },
    "smoother": {
        "window": 30,
        "eta": 0.97,
    },
    "agent": {
        "model": "gpt-4o",
        "temperature": 0.2,
        "n_rounds": 2,
        "top_k": 3,
        "skip_enabled": True,
        "allow_repeat_retrieval": False,
        "category_blocklist": "travel,lifestyle,puzzles",
        "max_chars": 2000,
        "overlap_chars": 200,
        "initial_note_file": "",
        "transcript": "",  # path -> replay from transcript; "record:<path>" -> record
    },
    "network": {
        "d_model": 32,
        "n_hidden_layers": 1,
        "dropout_rate": 0.0,
        "learning_rate": 1e-3,
        "batch_size": 128,
        "epochs": 30,
        "batchnorm": True,
        "pretrain_epochs": 0,  # 0 -> same as epochs
    },
    "portfolio": {
        "tp_window": 60,
        "annualization": 252,
        "alpha_factors": "tangency",  # comma list: tangency, market
        "n_anomaly_quantiles": 5,
    },
    "flags": {
        "use_memory": True,
        "use_asset_emb": True,
        "use_factors": True,
        "pretrain": True,
        "refine": True,
        "notes": True,
    },
    "run": {
        "seed": 7,
    },
}


def _coerce(section: str, key: str, raw):
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key [{section}] {key}")
    default = DEFAULTS[section][key]
    if isinstance(raw, str):
        raw = raw.strip()
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            try:
                return int(raw)
            except ValueError:
                raise ConfigError(f"[{section}] {key}: expected an integer, got {raw!r}") from None
        if isinstance(default, float):
            try:
                return float(raw)
            except ValueError:
                raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}") from None
        return raw
    if isinstance(default, bool) and not isinstance(raw, bool):
        raise ConfigError(f"[{section}] {key}: expected a boolean")
    if isinstance(default, float) and isinstance(raw, int):
        return float(raw)
    if type(raw) is not type(default) and default != "":
        raise ConfigError(f"[{section}] {key}: expected {type(default).__name__}")
    return raw


class RunConfig:
    """Resolved configuration with typed access and a content-hash run id."""

    def __init__(self, raw: dict[str, dict]) -> None:
        self.raw = raw

    def get(self, section: str, key: str):
        try:
            return self.raw[section][key]
        except KeyError:
            raise ConfigError(f"unknown config key [{section}] {key}") from None

    def set(self, section: str, key: str, value) -> None:
        self.raw.setdefault(section, {})[key] = _coerce(section, key, value)

    def copy(self) -> "RunConfig":
        return RunConfig(copy.deepcopy(self.raw))

    def resolved_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2)

    @property
    def run_id(self) -> str:
        hashable = copy.deepcopy(self.raw)
        hashable["paths"].pop("output_dir", None)  # id must not depend on output root
        payload = json.dumps(hashable, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return int(self.get("run", "seed"))

    def blocklist(self) -> frozenset[str]:
        raw = self.get("agent", "category_blocklist")
        return frozenset(c.strip().lower() for c in raw.split(",") if c.strip())

    def alpha_factor_names(self) -> list[str]:
        raw = self.get("portfolio", "alpha_factors")
        names = [c.strip().lower() for c in raw.split(",") if c.strip()]
        for n in names:
            if n not in ("tangency", "market"):
                raise ConfigError(f"unknown alpha factor {n!r} (expected tangency/market)")
        if not names:
            raise ConfigError("alpha_factors must name at least one factor")
        return names


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the INI file, then key=value overrides, in that order.

    Overrides use the form section.key=value (the CLI's --set).
    """
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as err:
            raise ConfigError(f"cannot parse {path}: {err}") from None
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}] in {path}")
            for key, value in parser.items(section):
                raw[section][key] = _coerce(section, key, value)
    for assignment in overrides or []:
        if "=" not in assignment:
            raise ConfigError(f"override must be section.key=value, got {assignment!r}")
        target, value = assignment.split("=", 1)
        if "." not in target:
            raise ConfigError(f"override must be section.key=value, got {assignment!r}")
        section, key = target.split(".", 1)
        raw.setdefault(section, {})
        raw[section][key] = _coerce(section.strip(), key.strip(), value)
    cfg = RunConfig(raw)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if not (0.0 < cfg.get("smoother", "eta") <= 1.0):
        raise ConfigError("[smoother] eta must be in (0, 1]")
    if cfg.get("smoother", "window") < 1:
        raise ConfigError("[smoother] window must be >= 1")
    if cfg.get("agent", "n_rounds") < 1:
        raise ConfigError("[agent] n_rounds must be >= 1")
    if cfg.get("agent", "top_k") < 0:
        raise ConfigError("[agent] top_k must be >= 0")
    if not (0.0 <= cfg.get("network", "dropout_rate") < 1.0):
        raise ConfigError("[network] dropout_rate must be in [0, 1)")
    if cfg.get("embedding", "backend") not in ("auto", "mock", "remote"):
        raise ConfigError("[embedding] backend must be auto, mock, or remote")
    cfg.alpha_factor_names()
