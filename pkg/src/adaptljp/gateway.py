"""Uniform client for chat-completion and embedding backends.

One gateway fronts a chat backend and an embedding backend with a persistent
content-addressed response cache, exponential-backoff retries on transient
failures, and a bounded in-flight request count. Greedy requests are cached;
non-greedy requests always hit the backend. Refusals are a first-class
response state (``finish_reason="refusal"``), not an exception, so callers
can count them and fall back.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import re
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

ROLES = ("system", "user", "assistant")
FINISH_REASONS = ("stop", "length", "refusal", "error")

DEFAULT_REFUSAL_MARKERS = (
    "i cannot",
    "i can't",
    "i can not",
    "i'm sorry",
    "i am sorry",
    "i am unable",
    "i'm unable",
    "as an ai",
    "无法回答",
    "我不能",
)


class BackendError(Exception):
    """Base error for backend failures."""


class TransientBackendError(BackendError):
    """Retryable failure (timeouts, 429/5xx and the like)."""


class AuthenticationError(BackendError):
    """Credential failure; never retried."""


class RetriesExhaustedError(BackendError):
    def __init__(self, attempts: int, last: Exception):
        super().__init__(f"request failed after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


class EmbeddingDimensionError(BackendError):
    pass


class ScriptedBackendError(BackendError):
    """No scripted rule matched a request; the fixture set is incomplete."""


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown message role {self.role!r}")


@dataclass(frozen=True)
class Decoding:
    """Decoding settings; a greedy request carries no sampling randomness."""

    greedy: bool = True
    max_output_tokens: int = 1024
    temperature: float | None = None
    top_p: float | None = None

    def __post_init__(self):
        if self.greedy and (self.temperature is not None or self.top_p is not None):
            raise ValueError("greedy decoding must not carry sampling settings")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[Message, ...]
    decoding: Decoding = Decoding()

    def __post_init__(self):
        if not self.messages:
            raise ValueError("chat request needs at least one message")

    @classmethod
    def user(cls, model_id: str, prompt: str, decoding: Decoding | None = None) -> "ChatRequest":
        return cls(
            model_id=model_id,
            messages=(Message("user", prompt),),
            decoding=decoding or Decoding(),
        )

    def prompt_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class ChatResponse:
    content: str | None
    finish_reason: str
    usage: Usage = Usage()

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"unknown finish_reason {self.finish_reason!r}")
        has_content = self.content is not None
        if has_content != (self.finish_reason in ("stop", "length")):
            raise ValueError(
                "content must be present exactly for stop/length responses "
                f"(finish_reason={self.finish_reason!r})"
            )


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @property
    def dimension(self) -> int:
        return len(self.values)


class ChatBackend(Protocol):
    def chat(self, request: ChatRequest) -> ChatResponse: ...


class EmbeddingBackend(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


@dataclass
class ScriptedRule:
    """First-match-wins fixture rule for the scripted chat backend.

    ``contains`` substrings must all appear in the request's concatenated
    message text; ``regex`` (if given) must also match. ``fail_times`` makes
    the rule raise a transient error that many times before answering, for
    retry testing.
    """

    response: str = ""
    contains: tuple[str, ...] = ()
    regex: str | None = None
    finish_reason: str = "stop"
    fail_times: int = 0

    def matches(self, text: str) -> bool:
        if any(c not in text for c in self.contains):
            return False
        if self.regex is not None and re.search(self.regex, text) is None:
            return False
        return True


class ScriptedChatBackend:
    """Deterministic chat backend driven by request-pattern fixtures."""

    def __init__(self, rules: Sequence[ScriptedRule]):
        self.rules = list(rules)
        self.call_log: list[str] = []
        self._fails_left = {id(r): r.fail_times for r in self.rules}
        self._lock = threading.Lock()

    @classmethod
    def from_rule_objs(cls, objs: Sequence[dict]) -> "ScriptedChatBackend":
        rules = []
        for obj in objs:
            contains = obj.get("contains", ())
            if isinstance(contains, str):
                contains = (contains,)
            rules.append(
                ScriptedRule(
                    response=obj.get("response", ""),
                    contains=tuple(contains),
                    regex=obj.get("regex"),
                    finish_reason=obj.get("finish_reason", "stop"),
                    fail_times=obj.get("fail_times", 0),
                )
            )
        return cls(rules)

    @classmethod
    def from_path(cls, path: Path | str) -> "ScriptedChatBackend":
        """Load fixtures from a JSON file or a directory of JSON files
        (merged in filename order); each file holds ``{"rules": [...]}``."""
        path = Path(path)
        files = sorted(path.glob("*.json")) if path.is_dir() else [path]
        objs: list[dict] = []
        for f in files:
            objs.extend(json.loads(f.read_text(encoding="utf-8"))["rules"])
        return cls.from_rule_objs(objs)

    def chat(self, request: ChatRequest) -> ChatResponse:
        text = request.prompt_text()
        with self._lock:
            self.call_log.append(text)
            for rule in self.rules:
                if not rule.matches(text):
                    continue
                if self._fails_left[id(rule)] > 0:
                    self._fails_left[id(rule)] -= 1
                    raise TransientBackendError("scripted transient failure")
                if rule.finish_reason == "refusal":
                    return ChatResponse(content=None, finish_reason="refusal")
                if rule.finish_reason == "error":
                    return ChatResponse(content=None, finish_reason="error")
                return ChatResponse(
                    content=rule.response,
                    finish_reason=rule.finish_reason,
                    usage=Usage(prompt_tokens=len(text), completion_tokens=len(rule.response)),
                )
        head = text[:160].replace("\n", " ")
        raise ScriptedBackendError(f"no scripted rule matches request: {head!r}...")


def _hash_floats(text: str, dimension: int, salt: str = "") -> list[float]:
    values: list[float] = []
    counter = 0
    while len(values) < dimension:
        digest = hashlib.sha256(f"{salt}\x00{text}\x00{counter}".encode("utf-8")).digest()
        for i in range(0, len(digest) - 3, 4):
            if len(values) >= dimension:
                break
            word = int.from_bytes(digest[i : i + 4], "big")
            values.append(word / 2**31 - 1.0)
        counter += 1
    return values


class HashEmbeddingBackend:
    """Deterministic pseudo-embeddings derived from a text hash."""

    def __init__(self, dimension: int = 16):
        self.dimension = dimension
        self.call_count = 0

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        self.call_count += 1
        return [_hash_floats(t, self.dimension) for t in texts]


class ScriptedEmbeddingBackend:
    """Fixture-driven embeddings: explicit vectors for known texts, a
    deterministic hash fallback for everything else."""

    def __init__(self, dimension: int, vectors: dict[str, Sequence[float]] | None = None,
                 fallback: str = "hash"):
        self.dimension = dimension
        self.vectors = {k: list(v) for k, v in (vectors or {}).items()}
        for text, vec in self.vectors.items():
            if len(vec) != dimension:
                raise EmbeddingDimensionError(
                    f"fixture vector for {text!r} has dimension {len(vec)}, expected {dimension}"
                )
        self.fallback = fallback
        self.call_count = 0

    @classmethod
    def from_path(cls, path: Path | str) -> "ScriptedEmbeddingBackend":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            dimension=obj["dimension"],
            vectors=obj.get("vectors", {}),
            fallback=obj.get("fallback", "hash"),
        )

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        self.call_count += 1
        out = []
        for text in texts:
            if text in self.vectors:
                out.append(list(self.vectors[text]))
            elif self.fallback == "hash":
                out.append(_hash_floats(text, self.dimension))
            else:
                raise ScriptedBackendError(f"no fixture vector for {text!r}")
        return out


class HttpChatBackend:
    """OpenAI-style chat-completions endpoint. Credentials come from an
    environment variable, never from config files."""

    def __init__(self, endpoint: str, api_key_env: str = "ADAPTLJP_API_KEY",
                 timeout: float = 60.0):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout

    def chat(self, request: ChatRequest) -> ChatResponse:
        import httpx

        api_key = os.environ.get(self.api_key_env, "")
        if not api_key:
            raise AuthenticationError(f"environment variable {self.api_key_env} is not set")
        payload = {
            "model": request.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "max_tokens": request.decoding.max_output_tokens,
        }
        if request.decoding.greedy:
            payload["temperature"] = 0.0
        else:
            if request.decoding.temperature is not None:
                payload["temperature"] = request.decoding.temperature
            if request.decoding.top_p is not None:
                payload["top_p"] = request.decoding.top_p
        try:
            resp = httpx.post(
                self.endpoint,
                json=payload,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self.timeout,
            )
        except httpx.HTTPError as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"backend returned HTTP {resp.status_code}")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"backend returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"backend returned HTTP {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        choice = body["choices"][0]
        finish = choice.get("finish_reason", "stop")
        content = choice.get("message", {}).get("content")
        if finish == "content_filter" or content is None:
            return ChatResponse(content=None, finish_reason="refusal")
        usage = body.get("usage", {})
        return ChatResponse(
            content=content,
            finish_reason="length" if finish == "length" else "stop",
            usage=Usage(
                prompt_tokens=usage.get("prompt_tokens", 0),
                completion_tokens=usage.get("completion_tokens", 0),
            ),
        )


class HttpEmbeddingBackend:
    def __init__(self, endpoint: str, model_id: str, api_key_env: str = "ADAPTLJP_API_KEY",
                 timeout: float = 60.0):
        self.endpoint = endpoint
        self.model_id = model_id
        self.api_key_env = api_key_env
        self.timeout = timeout

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        import httpx

        api_key = os.environ.get(self.api_key_env, "")
        if not api_key:
            raise AuthenticationError(f"environment variable {self.api_key_env} is not set")
        try:
            resp = httpx.post(
                self.endpoint,
                json={"model": self.model_id, "input": list(texts)},
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self.timeout,
            )
        except httpx.HTTPError as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"backend returned HTTP {resp.status_code}")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"backend returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"backend returned HTTP {resp.status_code}: {resp.text[:200]}")
        data = resp.json()["data"]
        return [item["embedding"] for item in data]


@dataclass
class GatewayStats:
    network_calls: int = 0
    cache_hits: int = 0
    retries: int = 0
    refusals: int = 0
    embed_calls: int = 0
    embed_cache_hits: int = 0

    def as_dict(self) -> dict:
        return {
            "network_calls": self.network_calls,
            "cache_hits": self.cache_hits,
            "retries": self.retries,
            "refusals": self.refusals,
            "embed_calls": self.embed_calls,
            "embed_cache_hits": self.embed_cache_hits,
        }


class _CacheStore:
    """Per-key linearizable cache: always-on in-memory dict, optionally
    mirrored to disk so runs are resumable."""

    def __init__(self, directory: Path | None):
        self.directory = directory
        self._mem: dict[str, dict] = {}
        self._lock = threading.Lock()
        if directory is not None:
            directory.mkdir(parents=True, exist_ok=True)

    def get(self, key: str) -> dict | None:
        with self._lock:
            if key in self._mem:
                return self._mem[key]
        if self.directory is not None:
            path = self.directory / f"{key}.json"
            if path.exists():
                obj = json.loads(path.read_text(encoding="utf-8"))
                with self._lock:
                    self._mem[key] = obj
                return obj
        return None

    def put(self, key: str, obj: dict) -> None:
        with self._lock:
            self._mem[key] = obj
        if self.directory is not None:
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as handle:
                    json.dump(obj, handle, ensure_ascii=False)
                os.replace(tmp, self.directory / f"{key}.json")
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise


def _cache_key(obj) -> str:
    canonical = json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class LlmGateway:
    """Shared front door to the chat and embedding backends.

    Safe to share across worker threads: cache entries are written atomically
    and the in-flight request count never exceeds the configured concurrency
    limit.
    """

    def __init__(
        self,
        chat_backend: ChatBackend | None = None,
        embedding_backend: EmbeddingBackend | None = None,
        *,
        embed_model_id: str = "embedder",
        cache_dir: Path | str | None = None,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        refusal_markers: tuple[str, ...] = DEFAULT_REFUSAL_MARKERS,
        concurrency: int | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.chat_backend = chat_backend
        self.embedding_backend = embedding_backend
        self.embed_model_id = embed_model_id
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.refusal_markers = refusal_markers
        self._sleep = sleep
        cache_root = Path(cache_dir) if cache_dir is not None else None
        self._chat_cache = _CacheStore(cache_root / "chat" if cache_root else None)
        self._embed_cache = _CacheStore(cache_root / "embed" if cache_root else None)
        self.stats = GatewayStats()
        self._stats_lock = threading.Lock()
        self._semaphore = threading.Semaphore(concurrency) if concurrency else None
        self.concurrency = concurrency

    def with_concurrency(self, limit: int) -> "LlmGateway":
        """Derived gateway sharing backends, caches, and stats, with at most
        ``limit`` backend requests in flight at once."""
        if limit < 1:
            raise ValueError("concurrency limit must be >= 1")
        derived = copy.copy(self)
        derived._semaphore = threading.Semaphore(limit)
        derived.concurrency = limit
        return derived

    def _bump(self, **deltas: int) -> None:
        with self._stats_lock:
            for name, delta in deltas.items():
                setattr(self.stats, name, getattr(self.stats, name) + delta)

    def _call_backend(self, fn, *args):
        attempts = self.max_retries + 1
        last: Exception | None = None
        for attempt in range(attempts):
            if attempt > 0:
                self._bump(retries=1)
                self._sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                if self._semaphore is not None:
                    with self._semaphore:
                        self._bump(network_calls=1)
                        return fn(*args)
                self._bump(network_calls=1)
                return fn(*args)
            except TransientBackendError as exc:
                last = exc
        raise RetriesExhaustedError(attempts, last)

    def _classify_refusal(self, response: ChatResponse) -> ChatResponse:
        if response.finish_reason != "stop" or response.content is None:
            return response
        head = response.content.lstrip().lower()
        if any(head.startswith(m) for m in self.refusal_markers):
            return ChatResponse(content=None, finish_reason="refusal", usage=response.usage)
        return response

    def complete(self, request: ChatRequest) -> ChatResponse:
        """Run one chat completion, serving greedy requests from cache."""
        if self.chat_backend is None:
            raise BackendError("no chat backend configured")
        key = None
        if request.decoding.greedy:
            key = _cache_key(
                {
                    "model": request.model_id,
                    "messages": [[m.role, m.content] for m in request.messages],
                    "max_output_tokens": request.decoding.max_output_tokens,
                }
            )
            cached = self._chat_cache.get(key)
            if cached is not None:
                self._bump(cache_hits=1)
                return ChatResponse(
                    content=cached["content"],
                    finish_reason=cached["finish_reason"],
                    usage=Usage(**cached["usage"]),
                )
        response = self._call_backend(self.chat_backend.chat, request)
        response = self._classify_refusal(response)
        if response.finish_reason == "refusal":
            self._bump(refusals=1)
        if key is not None and response.finish_reason in ("stop", "length", "refusal"):
            self._chat_cache.put(
                key,
                {
                    "content": response.content,
                    "finish_reason": response.finish_reason,
                    "usage": {
                        "prompt_tokens": response.usage.prompt_tokens,
                        "completion_tokens": response.usage.completion_tokens,
                    },
                },
            )
        return response

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        """Embed a batch, one vector per input in input order, cached per text."""
        if self.embedding_backend is None:
            raise BackendError("no embedding backend configured")
        if not texts:
            raise ValueError("embed requires a non-empty list of texts")
        keys = [_cache_key({"model": self.embed_model_id, "text": t}) for t in texts]
        found: dict[str, list[float]] = {}
        missing_texts: list[str] = []
        for text, key in zip(texts, keys):
            cached = self._embed_cache.get(key)
            if cached is not None:
                found[key] = cached["values"]
                self._bump(embed_cache_hits=1)
            elif text not in missing_texts:
                missing_texts.append(text)
        if missing_texts:
            def call(batch):
                self._bump(embed_calls=1)
                return self.embedding_backend.embed(batch)

            vectors = self._call_backend(call, missing_texts)
            if len(vectors) != len(missing_texts):
                raise BackendError(
                    f"embedding backend returned {len(vectors)} vectors "
                    f"for {len(missing_texts)} texts"
                )
            dims = {len(v) for v in vectors}
            if len(dims) > 1:
                raise EmbeddingDimensionError(f"mixed dimensions in one batch: {sorted(dims)}")
            for text, vec in zip(missing_texts, vectors):
                key = _cache_key({"model": self.embed_model_id, "text": text})
                self._embed_cache.put(key, {"values": list(vec)})
                found[key] = list(vec)
        out = [EmbeddingVector(values=tuple(found[key])) for key in keys]
        dims = {v.dimension for v in out}
        if len(dims) > 1:
            raise EmbeddingDimensionError(f"mixed dimensions across batch: {sorted(dims)}")
        return out
