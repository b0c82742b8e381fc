"""News-analysis agent: refine, skip-filter, iterative report refinement, notes.

Each news item is refined into a compact form, screened for investment
relevance, and analyzed over a configurable number of refinement rounds.
Every round embeds the current report, retrieves the most relevant memory
items as of the news timestamp, and asks the chat backend to refine the
report with them. Final reports update the rolling macro/market note and
are inserted into memory for future retrieval.

Skip signaling uses a structured action in the reply: a JSON object
{"action": "skip"} or {"action": "report", "text": ...}. The action is
honored both in the refine reply and in the opening-round reply, so a
skipped item costs exactly one backend call when the backend decides
early. Malformed JSON is treated as a plain-text report with a warning.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field, replace
from datetime import datetime
from importlib import resources
from pathlib import Path

from .data import NewsItem
from .embedding import TransportError
from .memory import MemoryStore

__all__ = [
    "ChatBackend",
    "HttpChatBackend",
    "MockChatBackend",
    "TranscriptRecorder",
    "ReplayBackend",
    "PromptSet",
    "AgentConfig",
    "AgentState",
    "AgentRuntime",
    "Note",
    "AnalysisReport",
    "refine_news",
    "analyze",
    "update_note",
    "run_day",
    "chat_backend_from_env",
]

log = logging.getLogger(__name__)

LLM_URL_ENV = "AAPM_LLM_URL"
LLM_KEY_ENV = "AAPM_LLM_KEY"

DEFAULT_BLOCKLIST = frozenset({"travel", "lifestyle", "puzzles"})

_TOKEN_RE = re.compile(r"[A-Za-z0-9][\w.%-]*")


# ---------------------------------------------------------------------------
# prompts


def _load_prompt(name: str) -> str:
    return (resources.files("aapm") / "prompts" / name).read_text(encoding="utf-8").strip()


@dataclass(frozen=True)
class PromptSet:
    """Versioned prompt templates with {placeholder} slots."""

    version: str
    system: str
    refine: str
    open: str
    note_section: str
    cont: str
    finish: str
    direct: str
    note_update: str
    initial_note: str

    @classmethod
    def bundled(cls) -> "PromptSet":
        return cls(
            version="v1",
            system=_load_prompt("system.txt"),
            refine=_load_prompt("refine_news.txt"),
            open=_load_prompt("analyze_open.txt"),
            note_section=_load_prompt("note_section.txt"),
            cont=_load_prompt("analyze_continue.txt"),
            finish=_load_prompt("analyze_finish.txt"),
            direct=_load_prompt("direct_analysis.txt"),
            note_update=_load_prompt("update_note.txt"),
            initial_note=_load_prompt("initial_note.txt"),
        )

    def templates(self) -> list[str]:
        return [
            self.system,
            self.refine,
            self.open,
            self.note_section,
            self.cont,
            self.finish,
            self.direct,
            self.note_update,
            self.initial_note,
        ]


# ---------------------------------------------------------------------------
# chat backends


class ChatBackend:
    """Interface for chat-completion style generation.

    Subclasses implement _generate(messages, kind); the base records every
    call kind so tests can account for them exactly, and truncates replies
    at the configured maximum output length.
    """

    model: str = "unknown"
    temperature: float = 0.2
    max_output_chars: int = 16000

    def __init__(self) -> None:
        self.calls: list[str] = []

    def generate(self, messages: list[dict], kind: str = "generic") -> str:
        self.calls.append(kind)
        reply = self._generate(messages, kind)
        return reply[: self.max_output_chars]

    def _generate(self, messages: list[dict], kind: str) -> str:
        raise NotImplementedError

    def call_count(self, kinds: set[str] | None = None) -> int:
        if kinds is None:
            return len(self.calls)
        return sum(1 for k in self.calls if k in kinds)

    def run_metadata(self) -> dict:
        return {
            "backend": type(self).__name__,
            "model": self.model,
            "temperature": self.temperature,
            "max_output_chars": self.max_output_chars,
        }


class HttpChatBackend(ChatBackend):
    """OpenAI-compatible chat endpoint.

    POST {model, temperature, messages} -> {choices: [{message: {content}}]}.
    Three attempts with exponential backoff; exhaustion raises
    TransportError so the orchestrator can mark the item failed and move on.
    """

    def __init__(
        self,
        url: str,
        api_key: str = "",
        model: str = "gpt-4o",
        temperature: float = 0.2,
        retries: int = 3,
        retry_wait: float = 1.0,
    ) -> None:
        super().__init__()
        self.url = url
        self.api_key = api_key
        self.model = model
        self.temperature = temperature
        self.retries = retries
        self.retry_wait = retry_wait

    def _generate(self, messages: list[dict], kind: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": messages,
        }
        last_err: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(self.url, json=payload, headers=headers, timeout=120)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except Exception as err:  # noqa: BLE001 - transport boundary
                last_err = err
                if attempt < self.retries - 1:
                    time.sleep(self.retry_wait * 2**attempt)
        raise TransportError(f"chat endpoint failed after {self.retries} attempts: {last_err}")


class MockChatBackend(ChatBackend):
    """Deterministic template mock for offline runs and tests.

    Replies are digests of the conversation: all non-system message tokens
    with prompt-template boilerplate removed, truncated to max_tokens.
    Content tokens therefore flow from the news through every refinement
    round into the final report, which keeps the downstream embedding
    signal intact without any network access.

    If skip_marker is set, any conversation containing it (case-insensitive)
    is answered with the skip action wherever an action reply is expected.
    """

    model = "mock"

    def __init__(
        self,
        prompts: PromptSet | None = None,
        skip_marker: str | None = None,
        max_tokens: int = 400,
        style: str = "digest",
        temperature: float = 0.2,
    ) -> None:
        super().__init__()
        prompts = prompts or PromptSet.bundled()
        self.temperature = temperature
        self.skip_marker = skip_marker.lower() if skip_marker else None
        self.max_tokens = max_tokens
        self.style = style
        vocab: set[str] = set()
        for tpl in prompts.templates():
            vocab.update(t.lower() for t in _TOKEN_RE.findall(tpl))
        self._vocab = vocab

    def _digest_tokens(self, messages: list[dict]) -> list[str]:
        tokens: list[str] = []
        for msg in messages:
            if msg.get("role") == "system":
                continue
            tokens.extend(_TOKEN_RE.findall(msg.get("content", "")))
        return [t for t in tokens if t.lower() not in self._vocab][: self.max_tokens]

    def _generate(self, messages: list[dict], kind: str) -> str:
        tokens = self._digest_tokens(messages)
        if self.skip_marker is not None and kind in {"refine", "open", "direct"}:
            if any(self.skip_marker == t.lower() for t in tokens):
                return json.dumps({"action": "skip"})
        text = " ".join(tokens) if tokens else "no salient content"
        if self.style == "verbose":
            tag = hashlib.sha256(text.encode("utf-8")).hexdigest()[:8]
            text = f"Analysis {tag}: the salient developments are {text}. Implications noted."
        if kind in {"open", "direct"}:
            return json.dumps({"action": "report", "text": text})
        return text


class TranscriptRecorder(ChatBackend):
    """Wraps a backend and appends {request_hash, response} JSONL rows."""

    def __init__(self, inner: ChatBackend, path: str | Path) -> None:
        super().__init__()
        self.inner = inner
        self.model = inner.model
        self.temperature = inner.temperature
        self.max_output_chars = inner.max_output_chars
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def _generate(self, messages: list[dict], kind: str) -> str:
        reply = self.inner.generate(messages, kind)
        row = {"request_hash": request_hash(self.model, self.temperature, messages), "response": reply}
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(row) + "\n")
        return reply


class ReplayBackend(ChatBackend):
    """Replays a recorded transcript by request hash, byte for byte.

    Responses for a repeated identical request are consumed in recording
    order. A request absent from the transcript is an error: replay must
    never silently invent output.
    """

    model = "replay"

    def __init__(self, path: str | Path, model: str = "replay", temperature: float = 0.2) -> None:
        super().__init__()
        self.model = model
        self.temperature = temperature
        self._queues: dict[str, list[str]] = {}
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                self._queues.setdefault(row["request_hash"], []).append(row["response"])

    def _generate(self, messages: list[dict], kind: str) -> str:
        key = request_hash(self.model, self.temperature, messages)
        queue = self._queues.get(key)
        if not queue:
            raise KeyError(f"no recorded response for request hash {key}")
        return queue.pop(0)


def request_hash(model: str, temperature: float, messages: list[dict]) -> str:
    payload = json.dumps(
        {"model": model, "temperature": temperature, "messages": messages},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def chat_backend_from_env(
    prompts: PromptSet | None = None,
    model: str = "gpt-4o",
    temperature: float = 0.2,
    quiet: bool = False,
) -> ChatBackend:
    """HTTP backend when AAPM_LLM_URL is set, deterministic mock otherwise."""
    url = os.environ.get(LLM_URL_ENV)
    if url:
        return HttpChatBackend(
            url, api_key=os.environ.get(LLM_KEY_ENV, ""), model=model, temperature=temperature
        )
    if not quiet:
        import sys

        print(
            f"*** {LLM_URL_ENV} not set: using the deterministic MOCK chat backend. "
            f"Set {LLM_URL_ENV}/{LLM_KEY_ENV} for a real endpoint. ***",
            file=sys.stderr,
        )
    return MockChatBackend(prompts=prompts, temperature=temperature)


# ---------------------------------------------------------------------------
# agent data types


@dataclass(frozen=True)
class Note:
    """Rolling macro/market context; as_of only ever advances."""

    text: str
    as_of: datetime


@dataclass(frozen=True)
class AnalysisReport:
    news_id: str
    round: int
    text: str
    retrieved_ids: tuple[tuple[str, ...], ...]
    skipped: bool
    timestamp: datetime
    failed: bool = False

    @property
    def final(self) -> bool:
        return not self.skipped and not self.failed


@dataclass(frozen=True)
class AgentConfig:
    n_rounds: int = 2
    top_k: int = 3
    skip_enabled: bool = True
    refine_enabled: bool = True
    notes_enabled: bool = True
    use_memory: bool = True
    allow_repeat_retrieval: bool = False
    prompt_version: str = "v1"
    category_blocklist: frozenset[str] = DEFAULT_BLOCKLIST

    def __post_init__(self) -> None:
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")


@dataclass
class AgentState:
    note: Note
    store: MemoryStore


@dataclass
class AgentRuntime:
    """Bundles the pieces every agent operation needs."""

    chat: ChatBackend
    embedder: object  # anything with embed_text(text) -> vector
    cfg: AgentConfig
    prompts: PromptSet


# ---------------------------------------------------------------------------
# reply protocol


def parse_action(reply: str) -> tuple[str, str]:
    """Decode a backend reply into ("skip"|"report", text).

    Anything that is not a well-formed action object is treated as a plain
    text report; attempted-but-malformed actions additionally log a warning.
    """
    stripped = reply.strip()
    try:
        obj = json.loads(stripped)
    except json.JSONDecodeError:
        if '"action"' in stripped:
            log.warning("malformed action reply treated as report text: %.80s", stripped)
        return "report", reply
    if isinstance(obj, dict):
        action = obj.get("action")
        if action == "skip":
            return "skip", ""
        if action == "report" and isinstance(obj.get("text"), str):
            return "report", obj["text"]
    log.warning("unrecognized action object treated as report text: %.80s", stripped)
    return "report", reply


def _news_text(item: NewsItem) -> str:
    return f"{item.title}\n{item.body}"


def _format_retrieved(items: list) -> str:
    if not items:
        return "(no additional relevant items found)"
    blocks = [f"[{i + 1}] ({it.id}) {it.text}" for i, it in enumerate(items)]
    return "\n\n".join(blocks)


# ---------------------------------------------------------------------------
# operations


def refine_news(item: NewsItem, backend: ChatBackend, prompts: PromptSet) -> tuple[str, bool]:
    """Compress a raw news item; returns (text, skipped).

    The refine reply may carry the skip action, letting a backend discard
    irrelevant items at the cost of this single call.
    """
    if not item.body.strip():
        raise ValueError(f"news item {item.id} has an empty body")
    messages = [
        {"role": "system", "content": prompts.system},
        {"role": "user", "content": prompts.refine.format(input=_news_text(item))},
    ]
    reply = backend.generate(messages, kind="refine")
    action, text = parse_action(reply)
    if action == "skip":
        return "", True
    return text, False


def _skipped_report(item: NewsItem) -> AnalysisReport:
    return AnalysisReport(
        news_id=item.id,
        round=0,
        text="",
        retrieved_ids=(),
        skipped=True,
        timestamp=item.timestamp,
    )


def analyze(
    item: NewsItem,
    refined: str,
    note: Note,
    store: MemoryStore,
    runtime: AgentRuntime,
) -> AnalysisReport:
    """Produce the final analysis report for one refined news item.

    Round 0 sends the opening prompt (with the note when notes are on) and
    may skip. Rounds 1..N each retrieve the top-K memory items as of the
    news timestamp using the current report as the query, then ask the
    backend to refine; the last round uses the finishing prompt. A
    transport failure mid-loop marks the report failed at its last
    completed round instead of aborting the run.
    """
    cfg = runtime.cfg
    if note.as_of > item.timestamp:
        raise ValueError(f"note as_of {note.as_of} is after news timestamp {item.timestamp}")
    opening = runtime.prompts.open.format(inputs=refined)
    if cfg.notes_enabled:
        opening += "\n\n" + runtime.prompts.note_section.format(macro=note.text)
    messages = [
        {"role": "system", "content": runtime.prompts.system},
        {"role": "user", "content": opening},
    ]
    reply = runtime.chat.generate(messages, kind="open")
    action, text = parse_action(reply)
    if action == "skip" and cfg.skip_enabled:
        return _skipped_report(item)
    messages.append({"role": "assistant", "content": text})

    retrieved_rounds: list[tuple[str, ...]] = []
    seen_ids: set[str] = set()
    current = text
    for i in range(1, cfg.n_rounds + 1):
        try:
            if cfg.use_memory and cfg.top_k > 0:
                query = runtime.embedder.embed_text(current)
                exclude = None if cfg.allow_repeat_retrieval else seen_ids
                hits = store.retrieve(query, k=cfg.top_k, as_of=item.timestamp, exclude_ids=exclude)
            else:
                hits = []
            ids = tuple(h.id for h in hits)
            seen_ids.update(ids)
            retrieved_rounds.append(ids)
            template = runtime.prompts.finish if i == cfg.n_rounds else runtime.prompts.cont
            messages.append({"role": "user", "content": template.format(inputs=_format_retrieved(hits))})
            current = runtime.chat.generate(messages, kind="round")
            messages.append({"role": "assistant", "content": current})
        except TransportError as err:
            log.warning("backend failure on %s at round %d: %s", item.id, i, err)
            return AnalysisReport(
                news_id=item.id,
                round=i - 1,
                text=current,
                retrieved_ids=tuple(retrieved_rounds[: i - 1]),
                skipped=False,
                timestamp=item.timestamp,
                failed=True,
            )
    return AnalysisReport(
        news_id=item.id,
        round=cfg.n_rounds,
        text=current,
        retrieved_ids=tuple(retrieved_rounds),
        skipped=False,
        timestamp=item.timestamp,
    )


def analyze_direct(
    item: NewsItem,
    note: Note,
    store: MemoryStore,
    runtime: AgentRuntime,
) -> AnalysisReport:
    """Single-call analysis used when iterative refinement is disabled.

    Retrieval (when memory is on) queries with the raw news embedding and
    the one reply is the final report; the skip action is honored.
    """
    cfg = runtime.cfg
    news = _news_text(item)
    if cfg.use_memory and cfg.top_k > 0:
        query = runtime.embedder.embed_text(news)
        hits = store.retrieve(query, k=cfg.top_k, as_of=item.timestamp)
    else:
        hits = []
    block = news
    if hits:
        block += "\n\nRecommended relevant information:\n" + _format_retrieved(hits)
    prompt = runtime.prompts.direct.format(news=block)
    if cfg.notes_enabled:
        prompt += "\n\n" + runtime.prompts.note_section.format(macro=note.text)
    messages = [
        {"role": "system", "content": runtime.prompts.system},
        {"role": "user", "content": prompt},
    ]
    reply = runtime.chat.generate(messages, kind="direct")
    action, text = parse_action(reply)
    if action == "skip" and cfg.skip_enabled:
        return _skipped_report(item)
    return AnalysisReport(
        news_id=item.id,
        round=0,
        text=text,
        retrieved_ids=(tuple(h.id for h in hits),) if hits else (),
        skipped=False,
        timestamp=item.timestamp,
    )


def update_note(
    note: Note,
    item: NewsItem,
    report: AnalysisReport,
    backend: ChatBackend,
    prompts: PromptSet,
) -> Note:
    """Fold a final report into the rolling note; failures leave it unchanged."""
    if report.skipped or report.failed:
        raise ValueError("update_note requires a final, non-skipped report")
    news_block = f"{_news_text(item)}\n\nAnalysis report:\n{report.text}"
    messages = [
        {"role": "system", "content": prompts.system},
        {
            "role": "user",
            "content": prompts.note_update.format(
                date=item.timestamp.date().isoformat(), macro=note.text, news=news_block
            ),
        },
    ]
    try:
        text = backend.generate(messages, kind="note")
    except TransportError as err:
        log.warning("note update failed for %s, keeping previous note: %s", item.id, err)
        return note
    return Note(text=text, as_of=item.timestamp)


def run_day(
    items: list[NewsItem],
    state: AgentState,
    runtime: AgentRuntime,
) -> tuple[list[AnalysisReport], AgentState]:
    """Process one day's news strictly in timestamp order.

    Every final report is embedded and inserted into memory before the next
    item runs, so later items can retrieve it; the note advances after each
    non-skipped item when notes are enabled. Per-item failures are recorded
    and do not abort the day.
    """
    cfg = runtime.cfg
    for a, b in zip(items, items[1:]):
        if a.timestamp > b.timestamp:
            raise ValueError("items must be sorted by timestamp")
    reports: list[AnalysisReport] = []
    for item in items:
        try:
            if cfg.refine_enabled:
                refined, skipped = refine_news(item, runtime.chat, runtime.prompts)
                if skipped:
                    reports.append(_skipped_report(item))
                    continue
                report = analyze(item, refined, state.note, state.store, runtime)
            else:
                report = analyze_direct(item, state.note, state.store, runtime)
        except TransportError as err:
            log.warning("item %s failed: %s", item.id, err)
            report = replace(_skipped_report(item), skipped=False, failed=True)
        reports.append(report)
        if not report.final:
            continue
        embedding = runtime.embedder.embed_text(report.text)
        state.store.insert_report(
            f"report:{item.id}", report.text, embedding, timestamp=item.timestamp
        )
        if cfg.notes_enabled:
            state.note = update_note(state.note, item, report, runtime.chat, runtime.prompts)
    return reports, state


def filter_blocklist(items: list[NewsItem], blocklist: frozenset[str]) -> list[NewsItem]:
    """Drop items whose category is manually excluded (dataset curation)."""
    blocked = {c.lower() for c in blocklist}
    return [it for it in items if it.category.lower() not in blocked]
