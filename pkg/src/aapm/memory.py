"""Vector memory: knowledge-base chunks plus past analysis reports.

Retrieval is an exact cosine-similarity scan with a hard as-of cutoff so
queries never see items inserted after their own point in time. Stores
persist as items.jsonl + vectors.bin (row-major float32, little-endian)
+ manifest.json.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

__all__ = ["MemoryItem", "MemoryStore", "ingest_corpus", "chunk_text"]

log = logging.getLogger(__name__)

EPOCH = datetime(1970, 1, 1)


@dataclass(frozen=True)
class MemoryItem:
    id: str
    text: str
    embedding: np.ndarray
    source: str  # "knowledge_base" | "report"
    timestamp: datetime


class MemoryStore:
    """Append-only collection of embedded text items."""

    def __init__(self, dimension: int) -> None:
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.items: list[MemoryItem] = []
        self._ids: set[str] = set()

    def __len__(self) -> int:
        return len(self.items)

    def add(self, item: MemoryItem) -> None:
        if item.id in self._ids:
            raise ValueError(f"duplicate memory id {item.id!r}")
        emb = np.asarray(item.embedding, dtype=np.float64)
        if emb.shape != (self.dimension,):
            raise ValueError(
                f"embedding dimension {emb.shape} does not match store ({self.dimension},)"
            )
        self.items.append(MemoryItem(item.id, item.text, emb, item.source, item.timestamp))
        self._ids.add(item.id)

    def insert_report(self, report_id: str, text: str, embedding: np.ndarray, timestamp: datetime) -> None:
        """Store a final analysis report for future retrieval."""
        self.add(MemoryItem(report_id, text, embedding, "report", timestamp))

    def retrieve(
        self,
        query: np.ndarray,
        k: int,
        as_of: datetime,
        exclude_ids: set[str] | None = None,
    ) -> list[MemoryItem]:
        """Top-k items by cosine similarity among those dated on or before as_of.

        Ties break toward the older timestamp, then the smaller id. Returns
        fewer than k only when fewer items are eligible.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dimension,):
            raise ValueError(
                f"query dimension {query.shape} does not match store ({self.dimension},)"
            )
        eligible = [
            it
            for it in self.items
            if it.timestamp <= as_of and (exclude_ids is None or it.id not in exclude_ids)
        ]
        if not eligible:
            return []
        # per-item dot products, not one matrix-vector product: blocked BLAS
        # kernels can round identical rows differently, which would break
        # exact similarity ties that the timestamp/id tie-break must decide
        qnorm = float(np.linalg.norm(query))
        scored = []
        for it in eligible:
            denom = float(np.linalg.norm(it.embedding)) * qnorm
            sim = float(it.embedding @ query) / denom if denom > 0 else 0.0
            scored.append((-sim, it.timestamp, it.id, it))
        scored.sort(key=lambda row: row[:3])
        return [row[3] for row in scored[:k]]

    # -- persistence ----------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / "items.jsonl").open("w", encoding="utf-8") as fh:
            for it in self.items:
                fh.write(
                    json.dumps(
                        {
                            "id": it.id,
                            "text": it.text,
                            "source": it.source,
                            "timestamp": it.timestamp.isoformat(),
                        }
                    )
                    + "\n"
                )
        vecs = (
            np.stack([it.embedding for it in self.items]).astype("<f4")
            if self.items
            else np.zeros((0, self.dimension), dtype="<f4")
        )
        (directory / "vectors.bin").write_bytes(vecs.tobytes(order="C"))
        (directory / "manifest.json").write_text(
            json.dumps({"dimension": self.dimension, "count": len(self.items)}, indent=2)
        )

    @classmethod
    def load(cls, directory: str | Path) -> "MemoryStore":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        store = cls(dimension=manifest["dimension"])
        raw = (directory / "vectors.bin").read_bytes()
        vecs = np.frombuffer(raw, dtype="<f4").reshape(manifest["count"], manifest["dimension"])
        with (directory / "items.jsonl").open("r", encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                row = json.loads(line)
                store.add(
                    MemoryItem(
                        id=row["id"],
                        text=row["text"],
                        embedding=vecs[i].astype(np.float64),
                        source=row["source"],
                        timestamp=datetime.fromisoformat(row["timestamp"]),
                    )
                )
        return store


def chunk_text(text: str, max_chars: int = 2000, overlap_chars: int = 200) -> list[str]:
    """Split text at paragraph boundaries into chunks of at most max_chars.

    Consecutive chunks share an overlap_chars tail so retrieval never loses
    context that straddles a boundary. Paragraphs longer than max_chars are
    hard-wrapped.
    """
    if max_chars < 1:
        raise ValueError("max_chars must be positive")
    if overlap_chars >= max_chars:
        raise ValueError("overlap_chars must be smaller than max_chars")
    paragraphs = [p.strip() for p in text.split("\n\n") if p.strip()]
    pieces: list[str] = []
    for p in paragraphs:
        while len(p) > max_chars:
            pieces.append(p[:max_chars])
            p = p[max_chars - overlap_chars :]
        pieces.append(p)

    chunks: list[str] = []
    current = ""
    for piece in pieces:
        candidate = (current + "\n\n" + piece) if current else piece
        if len(candidate) <= max_chars:
            current = candidate
        else:
            if current:
                chunks.append(current)
                tail = current[-overlap_chars:] if overlap_chars else ""
                current = (tail + "\n\n" + piece) if tail else piece
                while len(current) > max_chars:
                    chunks.append(current[:max_chars])
                    current = current[max_chars - overlap_chars :]
            else:
                current = piece
    if current:
        chunks.append(current)
    return chunks


def ingest_corpus(
    directory: str | Path,
    embedder,
    max_chars: int = 2000,
    overlap_chars: int = 200,
) -> MemoryStore:
    """Chunk and embed every readable text file under a corpus directory.

    Knowledge-base items carry the epoch timestamp so they are retrievable
    at any as-of time. Unreadable files are skipped with a warning; an
    empty corpus yields an empty store.
    """
    directory = Path(directory)
    store = MemoryStore(dimension=embedder.dim)
    if not directory.exists():
        log.warning("corpus directory %s does not exist; starting with empty memory", directory)
        return store
    for path in sorted(directory.rglob("*.txt")):
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as err:
            log.warning("skipping unreadable corpus file %s: %s", path, err)
            continue
        for i, chunk in enumerate(chunk_text(text, max_chars, overlap_chars)):
            store.add(
                MemoryItem(
                    id=f"kb:{path.name}:{i}",
                    text=chunk,
                    embedding=embedder.embed_text(chunk),
                    source="knowledge_base",
                    timestamp=EPOCH,
                )
            )
    return store
