"""Chat-completion client with disk cache, retry and cassette record/replay."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class Stage(str, Enum):
    JUDGE = "judge"
    SEED = "seed"
    GOAL = "goal"
    FLOW = "flow"
    DIALOGUE = "dialogue"
    COMPLICATE = "complicate"


# dialogue generation samples for diversity; everything else is greedy
DEFAULT_DECODING: dict[Stage, tuple[float, float]] = {
    Stage.JUDGE: (0.0, 1.0),
    Stage.SEED: (0.0, 1.0),
    Stage.GOAL: (0.0, 1.0),
    Stage.FLOW: (0.0, 1.0),
    Stage.DIALOGUE: (0.7, 1.0),
    Stage.COMPLICATE: (0.0, 1.0),
}


class LLMError(RuntimeError):
    pass


class TransientError(LLMError):
    """Failure worth retrying (transport error, rate limit, 5xx, empty body)."""


class RetriesExhausted(LLMError):
    pass


class ReplayMiss(LLMError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    stage: Stage
    temperature: float = 0.0
    top_p: float = 1.0

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        for role, text in self.messages:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
            if not isinstance(text, str):
                raise TypeError("message text must be a string")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p {self.top_p} outside (0, 1]")

    @classmethod
    def build(
        cls,
        stage: Stage,
        messages: Iterable[tuple[str, str]],
        decoding: dict[Stage, tuple[float, float]] | None = None,
    ) -> "ChatRequest":
        temperature, top_p = (decoding or DEFAULT_DECODING)[stage]
        return cls(messages=tuple((r, t) for r, t in messages), stage=stage, temperature=temperature, top_p=top_p)

    def payload(self) -> dict[str, Any]:
        return {
            "messages": [[r, t] for r, t in self.messages],
            "temperature": self.temperature,
            "top_p": self.top_p,
        }

    @property
    def digest(self) -> str:
        # the stage tag is bookkeeping only and deliberately not part of the key
        blob = json.dumps(self.payload(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict[str, Any]:
        return {**self.payload(), "stage": self.stage.value}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ChatRequest":
        return cls(
            messages=tuple((r, t) for r, t in data["messages"]),
            stage=Stage(data.get("stage", "judge")),
            temperature=float(data.get("temperature", 0.0)),
            top_p=float(data.get("top_p", 1.0)),
        )


@dataclass(frozen=True)
class ChatResponse:
    text: str
    cached: bool = False
    attempt_count: int = 1


class Backend(Protocol):
    def send(self, request: ChatRequest) -> str: ...


class HttpBackend:
    """OpenAI-style ``/chat/completions`` over HTTP; the token comes from an env var."""

    def __init__(
        self,
        base_url: str = "https://api.openai.com/v1",
        model: str = "gpt-4-turbo",
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 120.0,
        max_tokens: int | None = None,
        transport: Any = None,
    ):
        import httpx

        self.model = model
        self.max_tokens = max_tokens
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(api_key_env, "").strip()
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._httpx = httpx
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport
        )

    def send(self, request: ChatRequest) -> str:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": r, "content": t} for r, t in request.messages],
            "temperature": request.temperature,
            "top_p": request.top_p,
        }
        if self.max_tokens:
            body["max_tokens"] = self.max_tokens
        try:
            resp = self._client.post("/chat/completions", json=body)
        except self._httpx.TransportError as exc:
            raise TransientError(f"transport failure: {exc}") from exc
        if resp.status_code in (408, 429) or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise LLMError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LLMError(f"unexpected response body: {resp.text[:200]}") from exc

    def close(self) -> None:
        self._client.close()


def read_cassette(path: str | Path) -> dict[str, dict[str, Any]]:
    entries: dict[str, dict[str, Any]] = {}
    p = Path(path)
    if not p.exists():
        return entries
    with p.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                entries[rec["digest"]] = rec
    return entries


def write_cassette(path: str | Path, entries: dict[str, dict[str, Any]]) -> None:
    lines = [
        json.dumps(entries[d], sort_keys=True, ensure_ascii=False) + "\n" for d in sorted(entries)
    ]
    atomic_write(Path(path), "".join(lines))


class ReplayBackend:
    """Serves recorded responses; an unknown request is an error, never invented text."""

    def __init__(self, cassette: str | Path | dict[str, dict[str, Any]]):
        self.entries = cassette if isinstance(cassette, dict) else read_cassette(cassette)

    def send(self, request: ChatRequest) -> str:
        rec = self.entries.get(request.digest)
        if rec is None:
            raise ReplayMiss(f"no recorded response for {request.stage.value} request {request.digest[:12]}")
        return rec["response"]


class RecordingBackend:
    """Wraps a live backend and keeps every exchange for :func:`write_cassette`."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.entries: dict[str, dict[str, Any]] = {}
        self._lock = threading.Lock()

    def send(self, request: ChatRequest) -> str:
        text = self.inner.send(request)
        with self._lock:
            self.entries[request.digest] = {
                "digest": request.digest,
                "request": request.to_dict(),
                "response": text,
            }
        return text

    def save(self, path: str | Path, merge: bool = True) -> None:
        entries = read_cassette(path) if merge else {}
        entries.update(self.entries)
        write_cassette(path, entries)


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class ClientStats:
    backend_calls: int = 0
    cache_hits: int = 0
    retries: int = 0


@dataclass
class LLMClient:
    backend: Backend
    cache_dir: Path | None = None
    max_retries: int = 4
    backoff_base: float = 1.0
    backoff_cap: float = 30.0
    sleep: Callable[[float], None] = time.sleep
    stats: ClientStats = field(default_factory=ClientStats)

    def __post_init__(self) -> None:
        self._memory: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.cache_dir is not None:
            self.cache_dir = Path(self.cache_dir)
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _cache_path(self, digest: str) -> Path | None:
        return None if self.cache_dir is None else self.cache_dir / f"{digest}.json"

    def _cached(self, digest: str) -> str | None:
        with self._lock:
            if digest in self._memory:
                return self._memory[digest]
        path = self._cache_path(digest)
        if path is not None and path.exists():
            text = json.loads(path.read_text(encoding="utf-8"))["response"]
            with self._lock:
                self._memory[digest] = text
            return text
        return None

    def _store(self, request: ChatRequest, text: str) -> None:
        with self._lock:
            self._memory[request.digest] = text
        path = self._cache_path(request.digest)
        if path is not None:
            record = {"digest": request.digest, "request": request.to_dict(), "response": text}
            atomic_write(path, json.dumps(record, sort_keys=True, ensure_ascii=False))

    def complete(self, request: ChatRequest) -> ChatResponse:
        hit = self._cached(request.digest)
        if hit is not None:
            with self._lock:
                self.stats.cache_hits += 1
            return ChatResponse(text=hit, cached=True, attempt_count=1)

        last: Exception | None = None
        for attempt in range(1, self.max_retries + 2):
            with self._lock:
                self.stats.backend_calls += 1
            try:
                text = self.backend.send(request)
                if not text or not text.strip():
                    raise TransientError("empty completion")
            except TransientError as exc:
                last = exc
                if attempt > self.max_retries:
                    break
                with self._lock:
                    self.stats.retries += 1
                delay = min(self.backoff_cap, self.backoff_base * 2 ** (attempt - 1))
                log.warning("%s request failed (%s); retry %d in %.1fs", request.stage.value, exc, attempt, delay)
                self.sleep(delay)
                continue
            self._store(request, text)
            return ChatResponse(text=text, cached=False, attempt_count=attempt)
        raise RetriesExhausted(f"{request.stage.value} request failed after {self.max_retries} retries: {last}")

    def chat(self, stage: Stage, messages: Iterable[tuple[str, str]], decoding=None) -> str:
        return self.complete(ChatRequest.build(stage, messages, decoding)).text


def record_cassette(requests: Iterable[ChatRequest], backend: Backend, path: str | Path) -> int:
    """Send each request to ``backend`` and merge the exchanges into the cassette at ``path``.

    Returns the number of entries in the cassette afterwards.
    """
    recorder = RecordingBackend(backend)
    for req in requests:
        recorder.send(req)
    recorder.save(path)
    return len(read_cassette(path))


_OPEN = {"{": "}", "[": "]"}


def _balanced_spans(text: str) -> list[tuple[int, int]]:
    spans = []
    for start, ch in enumerate(text):
        if ch not in _OPEN:
            continue
        stack = [_OPEN[ch]]
        in_str = False
        escape = False
        for i in range(start + 1, len(text)):
            c = text[i]
            if in_str:
                if escape:
                    escape = False
                elif c == "\\":
                    escape = True
                elif c == '"':
                    in_str = False
                continue
            if c == '"':
                in_str = True
            elif c in _OPEN:
                stack.append(_OPEN[c])
            elif c in "}]":
                if c != stack[-1]:
                    break
                stack.pop()
                if not stack:
                    spans.append((start, i + 1))
                    break
    return spans


def extract_json(text: str) -> Any:
    """Longest balanced ``{...}`` or ``[...]`` span in ``text`` that parses as JSON.

    Raises ``ValueError`` when nothing parses.
    """
    for candidate in (text, text.replace("“", '"').replace("”", '"')):
        spans = sorted(_balanced_spans(candidate), key=lambda s: (s[0] - s[1], s[0]))
        for a, b in spans:
            try:
                return json.loads(candidate[a:b])
            except json.JSONDecodeError:
                continue
    raise ValueError("no JSON object or array found in model output")
