"""Chat-completion and web-search backends behind a bounded fan-out pool.

A pool dispatches a batch of requests concurrently (bounded by
``max_in_flight``), round-robins across endpoint replicas, retries transient
failures with exponential backoff, and optionally memoizes results in a
content-addressed disk cache. Deterministic mock transports plug into the
same pool so the full stack can run without network access.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import math
import os
import random
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Protocol, Sequence, Union
from urllib.parse import urlparse

import httpx

from .types import EvidenceSnippet

logger = logging.getLogger(__name__)


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self) -> None:
        if not isinstance(self.role, Role):
            object.__setattr__(self, "role", Role(self.role))


@dataclass(frozen=True)
class ChatRequest:
    """One chat-completion call; ``request_tag`` names the pipeline stage for metrics."""

    messages: tuple[ChatMessage, ...]
    max_tokens: int = 1024
    temperature: float = 0.0
    request_tag: str = ""

    def __post_init__(self) -> None:
        if not any(m.role is Role.USER for m in self.messages):
            raise ValueError("chat request needs at least one user message")
        if not math.isfinite(self.temperature):
            raise ValueError("temperature must be finite")

    @classmethod
    def user(cls, content: str, *, max_tokens: int = 1024, temperature: float = 0.0, request_tag: str = "") -> "ChatRequest":
        return cls(
            messages=(ChatMessage(Role.USER, content),),
            max_tokens=max_tokens,
            temperature=temperature,
            request_tag=request_tag,
        )

    def last_user_content(self) -> str:
        for message in reversed(self.messages):
            if message.role is Role.USER:
                return message.content
        return ""


@dataclass(frozen=True)
class SearchRequest:
    query: str
    top_k: int = 10

    def __post_init__(self) -> None:
        if not self.query:
            raise ValueError("search query must be non-empty")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    api_key_env_var: Optional[str] = None
    model_name: str = ""


@dataclass(frozen=True)
class RetryConfig:
    max_attempts: int = 3
    base_backoff: float = 0.1
    jitter: float = 0.05

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class BackendPoolConfig:
    endpoints: tuple[EndpointConfig, ...] = ()
    max_in_flight: int = 8
    per_request_timeout: float = 30.0
    retry: RetryConfig = field(default_factory=RetryConfig)
    cache_dir: Optional[Path] = None

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


class ErrorKind(str, Enum):
    TIMEOUT = "timeout"
    HTTP_STATUS = "http_status"
    DECODE_FAILURE = "decode_failure"
    RETRIES_EXHAUSTED = "retries_exhausted"


@dataclass(frozen=True)
class BackendError:
    """Terminal per-item failure; returned as a value, never raised from a batch."""

    kind: ErrorKind
    message: str
    attempts: int = 1
    status: Optional[int] = None


class TransportStatusError(Exception):
    """HTTP-level failure surfaced by a transport (or scripted by a mock)."""

    def __init__(self, status: int, message: str = ""):
        self.status = status
        super().__init__(message or f"HTTP {status}")


class TransportDecodeError(Exception):
    """Response arrived but could not be decoded into the expected shape."""


def _is_transient(exc: BaseException) -> bool:
    if isinstance(exc, (asyncio.TimeoutError, httpx.TimeoutException, httpx.TransportError)):
        return True
    if isinstance(exc, TransportStatusError):
        return exc.status == 429 or exc.status >= 500
    return False


def _terminal_error(exc: BaseException, attempts: int) -> BackendError:
    if isinstance(exc, TransportStatusError):
        return BackendError(ErrorKind.HTTP_STATUS, str(exc), attempts=attempts, status=exc.status)
    if isinstance(exc, TransportDecodeError):
        return BackendError(ErrorKind.DECODE_FAILURE, str(exc), attempts=attempts)
    if isinstance(exc, (asyncio.TimeoutError, httpx.TimeoutException)):
        return BackendError(ErrorKind.TIMEOUT, "request timed out", attempts=attempts)
    return BackendError(ErrorKind.TIMEOUT, f"transport failure: {exc}", attempts=attempts)


class ChatTransport(Protocol):
    async def complete(self, endpoint: EndpointConfig, request: ChatRequest) -> str: ...

    async def ping(self, endpoint: EndpointConfig) -> bool: ...


class SearchTransport(Protocol):
    async def search(self, endpoint: EndpointConfig, request: SearchRequest) -> list[EvidenceSnippet]: ...

    async def ping(self, endpoint: EndpointConfig) -> bool: ...


@dataclass
class PoolStats:
    requests: int = 0
    cache_hits: int = 0
    network_calls: int = 0
    retries: int = 0
    failures: int = 0


class _FanOutPool:
    """Shared batching/retry/cache machinery for chat and search pools.

    The in-flight limit is global per pool within one event loop; a fresh
    limiter is created per loop so sync wrappers (one ``asyncio.run`` per
    call) keep working.
    """

    _op_name = "op"

    def __init__(self, config: BackendPoolConfig):
        self.config = config
        self.stats = PoolStats()
        self._sem: Optional[asyncio.Semaphore] = None
        self._sem_loop: Optional[asyncio.AbstractEventLoop] = None
        self._sem_lock = threading.Lock()
        self._rr = 0
        self._rng = random.Random(0)
        if config.cache_dir is not None:
            Path(config.cache_dir).mkdir(parents=True, exist_ok=True)

    def _limiter(self) -> asyncio.Semaphore:
        # Semaphores bind to an event loop on first use, so a fresh one is
        # created whenever the running loop changes (sync wrappers use one
        # asyncio.run per call). Identity check against a held reference;
        # never reuse a semaphore across loops.
        loop = asyncio.get_running_loop()
        with self._sem_lock:
            if self._sem is None or self._sem_loop is not loop:
                self._sem = asyncio.Semaphore(self.config.max_in_flight)
                self._sem_loop = loop
            return self._sem

    def _next_endpoint(self) -> EndpointConfig:
        endpoints = self.config.endpoints or (EndpointConfig(base_url=""),)
        endpoint = endpoints[self._rr % len(endpoints)]
        self._rr += 1
        return endpoint

    # -- cache ---------------------------------------------------------

    def _cache_path(self, key_body: dict) -> Optional[Path]:
        if self.config.cache_dir is None:
            return None
        digest = hashlib.sha256(
            json.dumps({"op": self._op_name, "body": key_body}, sort_keys=True, ensure_ascii=False).encode("utf-8")
        ).hexdigest()
        return Path(self.config.cache_dir) / digest[:2] / f"{digest}.json"

    def _cache_get(self, path: Optional[Path]) -> Optional[Any]:
        if path is None or not path.exists():
            return None
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return json.load(fh)["result"]
        except (OSError, ValueError, KeyError):
            return None

    def _cache_put(self, path: Optional[Path], result: Any) -> None:
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"result": result}, fh, ensure_ascii=False)
        os.replace(tmp, path)

    # -- dispatch ------------------------------------------------------

    async def _call_with_retries(self, call: Callable[[EndpointConfig], Any]) -> Union[Any, BackendError]:
        retry = self.config.retry
        last_exc: Optional[BaseException] = None
        for attempt in range(1, retry.max_attempts + 1):
            endpoint = self._next_endpoint()
            try:
                async with self._limiter():
                    result = await asyncio.wait_for(call(endpoint), timeout=self.config.per_request_timeout)
                self.stats.network_calls += 1
                self.stats.retries += attempt - 1
                return result
            except Exception as exc:  # noqa: BLE001 - classified below
                last_exc = exc
                if not _is_transient(exc):
                    self.stats.retries += attempt - 1
                    self.stats.failures += 1
                    return _terminal_error(exc, attempts=attempt)
                if attempt < retry.max_attempts:
                    delay = retry.base_backoff * (2 ** (attempt - 1)) + self._rng.uniform(0, retry.jitter)
                    await asyncio.sleep(delay)
        self.stats.retries += retry.max_attempts - 1
        self.stats.failures += 1
        return BackendError(
            ErrorKind.RETRIES_EXHAUSTED,
            f"gave up after {retry.max_attempts} attempts: {last_exc}",
            attempts=retry.max_attempts,
        )

    async def _run_batch(
        self,
        items: Sequence[Any],
        key_fn: Callable[[Any], dict],
        call_fn: Callable[[EndpointConfig, Any], Any],
        decode_cached: Callable[[Any], Any],
        encode_result: Callable[[Any], Any],
    ) -> list[Any]:
        async def one(item: Any) -> Any:
            self.stats.requests += 1
            cache_path = self._cache_path(key_fn(item))
            cached = self._cache_get(cache_path)
            if cached is not None:
                self.stats.cache_hits += 1
                return decode_cached(cached)
            result = await self._call_with_retries(lambda ep: call_fn(ep, item))
            if not isinstance(result, BackendError):
                self._cache_put(cache_path, encode_result(result))
            return result

        return list(await asyncio.gather(*[one(item) for item in items]))


class ChatPool(_FanOutPool):
    """Batched chat-completion calls over one transport and N endpoint replicas."""

    _op_name = "chat"

    def __init__(self, config: BackendPoolConfig, transport: Optional[ChatTransport] = None):
        super().__init__(config)
        self.transport: ChatTransport = transport or OpenAiChatTransport()

    def _key(self, request: ChatRequest) -> dict:
        model = self.config.endpoints[0].model_name if self.config.endpoints else ""
        return {
            "model": model,
            "messages": [{"role": m.role.value, "content": m.content} for m in request.messages],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }

    async def chat_batch(self, requests: Sequence[ChatRequest]) -> list[Union[str, BackendError]]:
        """One result per request, order-aligned; failures are per-item values."""
        return await self._run_batch(
            requests,
            key_fn=self._key,
            call_fn=lambda ep, req: self.transport.complete(ep, req),
            decode_cached=lambda cached: str(cached),
            encode_result=lambda result: result,
        )

    def chat_batch_sync(self, requests: Sequence[ChatRequest]) -> list[Union[str, BackendError]]:
        return asyncio.run(self.chat_batch(requests))

    async def ping(self) -> bool:
        try:
            return await self.transport.ping(self._next_endpoint())
        except Exception:  # noqa: BLE001
            return False


class SearchPool(_FanOutPool):
    """Batched evidence-search calls, truncated to each request's top_k."""

    _op_name = "search"

    def __init__(self, config: BackendPoolConfig, transport: Optional[SearchTransport] = None):
        super().__init__(config)
        self.transport: SearchTransport = transport or SerperSearchTransport()

    @staticmethod
    def _key(request: SearchRequest) -> dict:
        return {"query": request.query, "top_k": request.top_k}

    async def search_batch(
        self, requests: Sequence[SearchRequest]
    ) -> list[Union[tuple[EvidenceSnippet, ...], BackendError]]:
        async def call(endpoint: EndpointConfig, request: SearchRequest) -> tuple[EvidenceSnippet, ...]:
            snippets = await self.transport.search(endpoint, request)
            return tuple(snippets[: request.top_k])

        return await self._run_batch(
            requests,
            key_fn=self._key,
            call_fn=call,
            decode_cached=lambda cached: tuple(EvidenceSnippet(**s) for s in cached),
            encode_result=lambda result: [
                {"title": s.title, "url": s.url, "snippet": s.snippet} for s in result
            ],
        )

    def search_batch_sync(self, requests: Sequence[SearchRequest]) -> list[Union[tuple[EvidenceSnippet, ...], BackendError]]:
        return asyncio.run(self.search_batch(requests))

    async def ping(self) -> bool:
        try:
            return await self.transport.ping(self._next_endpoint())
        except Exception:  # noqa: BLE001
            return False


# ---------------------------------------------------------------------------
# real transports


def _api_key(endpoint: EndpointConfig) -> Optional[str]:
    if not endpoint.api_key_env_var:
        return None
    return os.environ.get(endpoint.api_key_env_var)


class OpenAiChatTransport:
    """Chat-completions JSON over HTTPS (messages in, first choice text out)."""

    def __init__(self) -> None:
        self._client = httpx.AsyncClient(timeout=None)

    async def complete(self, endpoint: EndpointConfig, request: ChatRequest) -> str:
        headers = {}
        key = _api_key(endpoint)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": endpoint.model_name,
            "messages": [{"role": m.role.value, "content": m.content} for m in request.messages],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        response = await self._client.post(
            endpoint.base_url.rstrip("/") + "/chat/completions", json=body, headers=headers
        )
        if response.status_code != 200:
            raise TransportStatusError(response.status_code, f"chat endpoint returned {response.status_code}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportDecodeError(f"unexpected chat completion payload: {exc}") from exc

    async def ping(self, endpoint: EndpointConfig) -> bool:
        try:
            response = await self._client.get(endpoint.base_url.rstrip("/") + "/models", timeout=5.0)
            return response.status_code < 500
        except httpx.HTTPError:
            return False


class SerperSearchTransport:
    """Search JSON API: query in, organic results with title/link/snippet out."""

    def __init__(self) -> None:
        self._client = httpx.AsyncClient(timeout=None)

    async def search(self, endpoint: EndpointConfig, request: SearchRequest) -> list[EvidenceSnippet]:
        headers = {"Content-Type": "application/json"}
        key = _api_key(endpoint)
        if key:
            headers["X-API-KEY"] = key
        response = await self._client.post(
            endpoint.base_url.rstrip("/") + "/search",
            json={"q": request.query, "num": request.top_k},
            headers=headers,
        )
        if response.status_code != 200:
            raise TransportStatusError(response.status_code, f"search endpoint returned {response.status_code}")
        try:
            organic = response.json().get("organic", [])
            snippets = []
            for hit in organic:
                url = hit.get("link", "")
                # Only keep hits with a syntactically valid http(s) URL.
                parsed = urlparse(url)
                if parsed.scheme not in ("http", "https") or not parsed.netloc:
                    continue
                snippets.append(
                    EvidenceSnippet(title=hit.get("title", ""), url=url, snippet=hit.get("snippet", ""))
                )
            return snippets
        except (ValueError, AttributeError, TypeError) as exc:
            raise TransportDecodeError(f"unexpected search payload: {exc}") from exc

    async def ping(self, endpoint: EndpointConfig) -> bool:
        try:
            response = await self._client.get(endpoint.base_url, timeout=5.0)
            return response.status_code < 500
        except httpx.HTTPError:
            return False


# ---------------------------------------------------------------------------
# mock transports

ChatScript = Union[Callable[[ChatRequest], str], Mapping[str, str], str, None]
FailurePlan = Optional[list[Optional[BaseException]]]


def _seeded_reply(content: str, seed: int) -> str:
    digest = hashlib.sha256(f"{seed}:{content}".encode("utf-8")).hexdigest()
    return f"reply-{digest[:16]}"


class MockChatTransport:
    """Deterministic chat backend: scripted replies, latencies, and failures.

    ``script`` may be a callable on the request, a mapping keyed by the last
    user message, a constant string, or None for a seeded content-hash reply.
    ``fail_plan`` entries are consumed one per call: an exception instance is
    raised, None means the call succeeds.
    """

    def __init__(
        self,
        script: ChatScript = None,
        *,
        latency: float = 0.0,
        fail_plan: FailurePlan = None,
        seed: int = 0,
        healthy: bool = True,
    ):
        self.script = script
        self.latency = latency
        self.fail_plan = list(fail_plan) if fail_plan else []
        self.seed = seed
        self.healthy = healthy
        self.calls = 0

    def _reply(self, request: ChatRequest) -> str:
        if callable(self.script):
            return self.script(request)
        if isinstance(self.script, Mapping):
            return self.script.get(request.last_user_content(), "")
        if isinstance(self.script, str):
            return self.script
        return _seeded_reply(request.last_user_content(), self.seed)

    async def complete(self, endpoint: EndpointConfig, request: ChatRequest) -> str:
        self.calls += 1
        if self.latency:
            await asyncio.sleep(self.latency)
        if self.fail_plan:
            planned = self.fail_plan.pop(0)
            if planned is not None:
                raise planned
        return self._reply(request)

    async def ping(self, endpoint: EndpointConfig) -> bool:
        return self.healthy


class MockSearchTransport:
    """Deterministic search backend over a fixture index; unknown queries hit nothing."""

    def __init__(
        self,
        index: Optional[Mapping[str, Sequence[EvidenceSnippet]]] = None,
        *,
        latency: float = 0.0,
        fail_plan: FailurePlan = None,
        healthy: bool = True,
    ):
        self.index: Mapping[str, Sequence[EvidenceSnippet]] = index if index is not None else {}
        self.latency = latency
        self.fail_plan = list(fail_plan) if fail_plan else []
        self.healthy = healthy
        self.calls = 0

    async def search(self, endpoint: EndpointConfig, request: SearchRequest) -> list[EvidenceSnippet]:
        self.calls += 1
        if self.latency:
            await asyncio.sleep(self.latency)
        if self.fail_plan:
            planned = self.fail_plan.pop(0)
            if planned is not None:
                raise planned
        return list(self.index.get(request.query, []))

    async def ping(self, endpoint: EndpointConfig) -> bool:
        return self.healthy


def mock_llm(
    script: ChatScript = None,
    *,
    latency: float = 0.0,
    fail_plan: FailurePlan = None,
    seed: int = 0,
    max_in_flight: int = 8,
    max_attempts: int = 3,
    base_backoff: float = 0.01,
    cache_dir: Optional[Path] = None,
) -> ChatPool:
    """A chat pool backed by a deterministic mock transport."""
    config = BackendPoolConfig(
        endpoints=(EndpointConfig(base_url="mock://llm", model_name="mock-llm"),),
        max_in_flight=max_in_flight,
        per_request_timeout=30.0,
        retry=RetryConfig(max_attempts=max_attempts, base_backoff=base_backoff, jitter=0.0),
        cache_dir=cache_dir,
    )
    return ChatPool(config, transport=MockChatTransport(script, latency=latency, fail_plan=fail_plan, seed=seed))


def mock_search(
    index: Optional[Mapping[str, Sequence[EvidenceSnippet]]] = None,
    *,
    latency: float = 0.0,
    fail_plan: FailurePlan = None,
    max_in_flight: int = 8,
    max_attempts: int = 3,
    base_backoff: float = 0.01,
    cache_dir: Optional[Path] = None,
) -> SearchPool:
    """A search pool backed by a deterministic fixture index."""
    config = BackendPoolConfig(
        endpoints=(EndpointConfig(base_url="mock://search"),),
        max_in_flight=max_in_flight,
        per_request_timeout=30.0,
        retry=RetryConfig(max_attempts=max_attempts, base_backoff=base_backoff, jitter=0.0),
        cache_dir=cache_dir,
    )
    return SearchPool(config, transport=MockSearchTransport(index, latency=latency, fail_plan=fail_plan))
