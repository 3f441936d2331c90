"""Synchronous HTTP client for the reward service.

Numbers are decoded straight from the server's JSON (no re-rounding), the
schema version header is checked on every response, and 429/5xx responses are
retried with exponential backoff honoring Retry-After. Intended for
integration into RL training loops that fetch rewards per rollout group.

The auth token can be passed explicitly or via the ``FACTREWARD_API_TOKEN``
environment variable.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Optional, Sequence, Union
from urllib.parse import urlparse

import httpx

EXPECTED_SCHEMA_VERSION = "1"
AUTH_TOKEN_ENV_VAR = "FACTREWARD_API_TOKEN"


class RewardClientError(Exception):
    """Base class for everything this client raises."""


class NetworkError(RewardClientError):
    """The server could not be reached or the connection failed mid-request."""


class AuthError(RewardClientError):
    """The server rejected the request with 401."""


class SchemaMismatchError(RewardClientError):
    """The server speaks a different schema version than this client."""


class ServerError(RewardClientError):
    """The server reported a request-level error."""

    def __init__(self, status: int, kind: str, message: str):
        self.status = status
        self.kind = kind
        super().__init__(f"{status} {kind}: {message}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_fact: float
    r_dtl: float
    r_rel: float
    total: float
    malformed: bool
    judge_unparseable: bool
    request_id: str = ""


@dataclass(frozen=True)
class BatchItemError:
    """Per-item failure reported inline by the batch endpoint."""

    kind: str
    message: str


@dataclass(frozen=True)
class FactualityScore:
    supported: int
    total: int
    precision: Optional[float]
    smoothed_precision: float
    request_id: str = ""


@dataclass(frozen=True)
class HealthStatus:
    status: str
    backend_reachability: dict
    version: str


@dataclass(frozen=True)
class ClientConfig:
    base_url: str
    auth_token: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 3

    def __post_init__(self) -> None:
        parsed = urlparse(self.base_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValueError(f"base_url must be an http(s) URL, got {self.base_url!r}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


def _decode_breakdown(data: dict) -> RewardBreakdown:
    try:
        return RewardBreakdown(
            r_fact=data["r_fact"],
            r_dtl=data["r_dtl"],
            r_rel=data["r_rel"],
            total=data["total"],
            malformed=data["malformed"],
            judge_unparseable=data["judge_unparseable"],
            request_id=data.get("request_id", ""),
        )
    except KeyError as exc:
        raise SchemaMismatchError(f"reward payload missing field {exc}") from exc


class RewardClient:
    """Thread-safe client over a pooled HTTP connection.

    >>> client = RewardClient("http://127.0.0.1:8080")
    >>> client.reward("question", "<think>...</think><answer>...</answer>").total
    """

    def __init__(self, base_url_or_config: Union[str, ClientConfig], **kwargs: Any):
        if isinstance(base_url_or_config, ClientConfig):
            self.config = base_url_or_config
        else:
            self.config = ClientConfig(base_url=base_url_or_config, **kwargs)
        token = self.config.auth_token or os.environ.get(AUTH_TOKEN_ENV_VAR)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._http = httpx.Client(
            base_url=self.config.base_url, timeout=self.config.timeout, headers=headers
        )

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "RewardClient":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()

    # -- transport -----------------------------------------------------

    def _check_schema(self, response: httpx.Response) -> None:
        version = response.headers.get("X-Schema-Version")
        if version != EXPECTED_SCHEMA_VERSION:
            raise SchemaMismatchError(
                f"server schema version {version!r} != client {EXPECTED_SCHEMA_VERSION!r}"
            )

    def _backoff(self, attempt: int, response: Optional[httpx.Response]) -> float:
        if response is not None:
            retry_after = response.headers.get("Retry-After")
            if retry_after:
                try:
                    return min(float(retry_after), 30.0)
                except ValueError:
                    pass
        return min(0.1 * (2**attempt), 5.0)

    def _request(self, method: str, path: str, json_body: Optional[dict] = None) -> dict:
        last_error: Optional[Exception] = None
        for attempt in range(self.config.max_retries + 1):
            try:
                response = self._http.request(method, path, json=json_body)
            except httpx.HTTPError as exc:
                last_error = NetworkError(f"{method} {path}: {exc}")
                if attempt < self.config.max_retries:
                    time.sleep(self._backoff(attempt, None))
                    continue
                raise last_error from exc

            if response.status_code in (429,) or response.status_code >= 500:
                last_error = self._server_error(response)
                if attempt < self.config.max_retries:
                    time.sleep(self._backoff(attempt, response))
                    continue
                raise last_error
            if response.status_code == 401:
                raise AuthError("server rejected credentials (401)")
            if response.status_code >= 400:
                raise self._server_error(response)
            self._check_schema(response)
            try:
                return response.json()
            except ValueError as exc:
                raise SchemaMismatchError(f"non-JSON response from {path}") from exc
        raise last_error if last_error else NetworkError(f"{method} {path}: no attempt made")

    @staticmethod
    def _server_error(response: httpx.Response) -> ServerError:
        kind, message = "http_error", response.text[:200]
        try:
            error = response.json().get("error", {})
            kind = error.get("kind", kind)
            message = error.get("message", message)
        except ValueError:
            pass
        return ServerError(response.status_code, kind, message)

    # -- API -------------------------------------------------------------

    def reward(
        self,
        prompt: str,
        response: str,
        lambda_: Optional[float] = None,
        mu: Optional[float] = None,
        seed: Optional[int] = None,
    ) -> RewardBreakdown:
        body: dict[str, Any] = {"prompt": prompt, "response": response}
        if lambda_ is not None:
            body["lambda"] = lambda_
        if mu is not None:
            body["mu"] = mu
        if seed is not None:
            body["seed"] = seed
        return _decode_breakdown(self._request("POST", "/v1/reward", body))

    def reward_batch(
        self, items: Sequence[tuple[str, str]], seed: Optional[int] = None
    ) -> list[Union[RewardBreakdown, BatchItemError]]:
        """Order-aligned batch; per-item server errors come back as values."""
        body: dict[str, Any] = {
            "items": [{"prompt": prompt, "response": response} for prompt, response in items]
        }
        if seed is not None:
            body["seed"] = seed
        data = self._request("POST", "/v1/reward_batch", body)
        results: list[Union[RewardBreakdown, BatchItemError]] = []
        for entry in data.get("results", []):
            if "error" in entry:
                error = entry["error"]
                results.append(BatchItemError(kind=error.get("kind", "unknown"), message=error.get("message", "")))
            else:
                results.append(_decode_breakdown(entry))
        if len(results) != len(items):
            raise SchemaMismatchError(
                f"batch returned {len(results)} results for {len(items)} items"
            )
        return results

    def reward_many(
        self, items: Sequence[tuple[str, str]], max_workers: int = 8
    ) -> list[Union[RewardBreakdown, RewardClientError]]:
        """Concurrent convenience wrapper over single reward calls.

        Exceptions are captured per item so one failure cannot lose the rest.
        """

        def one(item: tuple[str, str]) -> Union[RewardBreakdown, RewardClientError]:
            try:
                return self.reward(item[0], item[1])
            except RewardClientError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(one, items))

    def score(self, text: str, seed: Optional[int] = None) -> FactualityScore:
        body: dict[str, Any] = {"text": text}
        if seed is not None:
            body["seed"] = seed
        data = self._request("POST", "/v1/score", body)
        try:
            return FactualityScore(
                supported=data["supported"],
                total=data["total"],
                precision=data["precision"],
                smoothed_precision=data["smoothed_precision"],
                request_id=data.get("request_id", ""),
            )
        except KeyError as exc:
            raise SchemaMismatchError(f"score payload missing field {exc}") from exc

    def health(self) -> HealthStatus:
        data = self._request("GET", "/healthz")
        return HealthStatus(
            status=data.get("status", "unknown"),
            backend_reachability=data.get("backend_reachability", {}),
            version=data.get("version", ""),
        )
