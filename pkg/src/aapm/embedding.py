"""Text embedding backends and the smoothed daily embedding pipeline.

A report embedding is a fixed-dimension float vector. Daily report
embeddings are averaged per day and then smoothed over a sliding window
with an exponential-decay kernel, producing the daily state vector that
feeds the pricing network.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import time
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path

import numpy as np

__all__ = [
    "EmbeddingError",
    "TransportError",
    "DailyEmbedding",
    "SmootherConfig",
    "EmbeddingBackend",
    "MockEmbeddingBackend",
    "LocalEmbeddingBackend",
    "RemoteEmbeddingBackend",
    "EmbeddingCache",
    "daily_average",
    "kernel_weights",
    "smooth",
    "backend_from_env",
]

EMB_URL_ENV = "AAPM_EMB_URL"
EMB_KEY_ENV = "AAPM_EMB_KEY"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class EmbeddingError(ValueError):
    """Invalid embedding arguments (empty text, dimension mismatch)."""


class TransportError(RuntimeError):
    """Remote backend unreachable after retries; safe to retry later."""


@dataclass(frozen=True)
class DailyEmbedding:
    """Mean report embedding for one day, with the surviving report count."""

    date: date
    vector: np.ndarray
    n_reports: int


@dataclass(frozen=True)
class SmootherConfig:
    """Sliding-window smoothing parameters.

    window is the maximum number of most-recent days entering the average;
    eta in (0, 1] is the per-day decay (1.0 = plain mean).
    """

    window: int
    eta: float

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not (0.0 < self.eta <= 1.0):
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")


class EmbeddingBackend:
    """Interface: maps text to a fixed-dimension vector."""

    dim: int
    name: str = "base"

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise EmbeddingError("cannot embed empty text")
        vec = self._embed(text)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise EmbeddingError(
                f"backend returned shape {vec.shape}, expected ({self.dim},)"
            )
        if not np.all(np.isfinite(vec)):
            raise EmbeddingError("backend returned non-finite embedding")
        return vec

    def embed_many(self, texts: list[str]) -> np.ndarray:
        return np.stack([self.embed_text(t) for t in texts])

    def _embed(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def signature(self) -> str:
        """Stable identifier used as part of cache keys."""
        return f"{self.name}:{self.dim}"


class MockEmbeddingBackend(EmbeddingBackend):
    """Deterministic hash embedder for tests and offline runs.

    Each token maps to a fixed pseudo-random direction derived from a
    seeded SHA-256 stream; a text embeds to the unit-normalized mean of
    its token vectors. Identical text always yields identical vectors,
    on any platform.
    """

    name = "mock"

    def __init__(self, dim: int = 32, seed: int = 0) -> None:
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            raw = b""
            block = 0
            need = self.dim * 8
            key = f"{self.seed}\x1f{token}".encode("utf-8")
            while len(raw) < need:
                raw += hashlib.sha256(key + struct.pack("<I", block)).digest()
                block += 1
            ints = np.frombuffer(raw[:need], dtype="<u8")
            # uniform in [-1, 1), exactly reproducible across platforms
            vec = ints.astype(np.float64) / 2.0**63 - 1.0
            self._token_cache[token] = vec
        return vec

    def _embed(self, text: str) -> np.ndarray:
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            tokens = [text]
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += self._token_vector(tok)
        acc /= len(tokens)
        norm = float(np.linalg.norm(acc))
        if norm == 0.0:  # unreachable in practice, but keep total
            acc[0] = 1.0
            norm = 1.0
        return acc / norm

    def signature(self) -> str:
        return f"{self.name}:{self.dim}:{self.seed}"


class LocalEmbeddingBackend(EmbeddingBackend):
    """Hook around a user-supplied callable (e.g. a local sentence encoder)."""

    name = "local"

    def __init__(self, fn, dim: int) -> None:
        self.fn = fn
        self.dim = dim

    def _embed(self, text: str) -> np.ndarray:
        return np.asarray(self.fn(text), dtype=np.float64)


class RemoteEmbeddingBackend(EmbeddingBackend):
    """HTTP embedding endpoint speaking the OpenAI-compatible shape.

    POST {"input": [texts]} -> {"data": [{"embedding": [...]}]}. Transport
    failures are retried with exponential backoff and surface as
    TransportError so callers can mark the item and continue.
    """

    name = "remote"

    def __init__(
        self,
        url: str,
        api_key: str = "",
        dim: int | None = None,
        model: str | None = None,
        retries: int = 3,
        retry_wait: float = 1.0,
    ) -> None:
        self.url = url
        self.api_key = api_key
        self.model = model
        self.retries = retries
        self.retry_wait = retry_wait
        self.dim = dim if dim is not None else self._probe_dim()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, texts: list[str]) -> list[list[float]]:
        import requests

        payload: dict = {"input": texts}
        if self.model:
            payload["model"] = self.model
        last_err: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(
                    self.url, json=payload, headers=self._headers(), timeout=60
                )
                resp.raise_for_status()
                body = resp.json()
                return [row["embedding"] for row in body["data"]]
            except Exception as err:  # noqa: BLE001 - transport boundary
                last_err = err
                if attempt < self.retries - 1:
                    time.sleep(self.retry_wait * 2**attempt)
        raise TransportError(f"embedding endpoint failed after {self.retries} attempts: {last_err}")

    def _probe_dim(self) -> int:
        return len(self._post(["dimension probe"])[0])

    def _embed(self, text: str) -> np.ndarray:
        return np.asarray(self._post([text])[0], dtype=np.float64)

    def embed_many(self, texts: list[str]) -> np.ndarray:
        for t in texts:
            if not t:
                raise EmbeddingError("cannot embed empty text")
        rows = self._post(list(texts))
        out = np.asarray(rows, dtype=np.float64)
        if out.shape != (len(texts), self.dim):
            raise EmbeddingError(f"endpoint returned shape {out.shape}")
        return out

    def signature(self) -> str:
        return f"{self.name}:{self.url}:{self.model}:{self.dim}"


class EmbeddingCache:
    """JSONL cache of {id, vector} rows keyed by content hash.

    Wraps a backend so repeated runs skip recomputation. The key hashes
    the backend signature together with the text, so switching backends
    never serves stale vectors.
    """

    def __init__(self, backend: EmbeddingBackend, path: str | Path) -> None:
        self.backend = backend
        self.dim = backend.dim
        self.path = Path(path)
        self._mem: dict[str, np.ndarray] = {}
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    self._mem[row["id"]] = np.asarray(row["vector"], dtype=np.float64)

    def key(self, text: str) -> str:
        digest = hashlib.sha256(
            (self.backend.signature() + "\x00" + text).encode("utf-8")
        ).hexdigest()
        return digest

    def embed_text(self, text: str) -> np.ndarray:
        key = self.key(text)
        vec = self._mem.get(key)
        if vec is None:
            vec = self.backend.embed_text(text)
            self._mem[key] = vec
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"id": key, "vector": vec.tolist()}) + "\n")
        return vec

    def signature(self) -> str:
        return self.backend.signature()


def daily_average(
    reports: list[tuple[datetime, np.ndarray]],
    day: date,
    dim: int,
    placeholder: np.ndarray | None = None,
) -> DailyEmbedding:
    """Component-wise mean of one day's report embeddings.

    An empty day yields the placeholder vector (zeros unless configured)
    with n_reports = 0.
    """
    if placeholder is None:
        placeholder = np.zeros(dim)
    if not reports:
        return DailyEmbedding(date=day, vector=np.array(placeholder, dtype=np.float64), n_reports=0)
    vecs = []
    for ts, vec in reports:
        if ts.date() != day:
            raise ValueError(f"report timestamp {ts} not on {day}")
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (dim,):
            raise EmbeddingError(f"dimension mismatch: {vec.shape} vs ({dim},)")
        vecs.append(vec)
    mean = np.mean(np.stack(vecs), axis=0)
    return DailyEmbedding(date=day, vector=mean, n_reports=len(vecs))


def kernel_weights(L: int, eta: float) -> np.ndarray:
    """Exponential-decay weights over an L-day window.

    Weight i (1-based, i = L most recent) is eta**(L - i) normalized to
    sum to one, so the newest day carries the most weight for eta < 1 and
    all days weigh equally at eta = 1.
    """
    if L < 1:
        raise ValueError(f"window length must be >= 1, got {L}")
    if not (0.0 < eta <= 1.0):
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    powers = np.arange(L - 1, -1, -1, dtype=np.float64)  # L-i for i=1..L
    w = eta**powers
    return w / w.sum()


def smooth(
    daily: list[DailyEmbedding],
    d: date,
    cfg: SmootherConfig,
) -> np.ndarray:
    """Decay-weighted average of the most recent daily embeddings.

    Uses the last min(window, available) entries dated on or before d.
    The series operates over days present in the data, so calendar gaps
    (weekends, holidays) do not dilute the window.
    """
    history = [e for e in daily if e.date <= d]
    if not history:
        raise ValueError(f"no daily embeddings on or before {d}")
    history.sort(key=lambda e: e.date)
    L = min(cfg.window, len(history))
    window = history[-L:]
    w = kernel_weights(L, cfg.eta)
    mat = np.stack([e.vector for e in window])
    return w @ mat


def backend_from_env(
    dim: int = 32, seed: int = 0, quiet: bool = False
) -> EmbeddingBackend:
    """Remote backend when AAPM_EMB_URL is set, mock otherwise."""
    url = os.environ.get(EMB_URL_ENV)
    if url:
        return RemoteEmbeddingBackend(url, api_key=os.environ.get(EMB_KEY_ENV, ""))
    if not quiet:
        import sys

        print(
            f"*** {EMB_URL_ENV} not set: using the deterministic MOCK embedder "
            f"(dim={dim}). Set {EMB_URL_ENV}/{EMB_KEY_ENV} for a real endpoint. ***",
            file=sys.stderr,
        )
    return MockEmbeddingBackend(dim=dim, seed=seed)
