"""Flat YAML/JSON runtime configuration and stack assembly.

One config file describes the backends (real endpoints or built-in
deterministic mocks), pipeline knobs, reward weights, and server limits.
Secrets never live in the file; only environment-variable names do.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .backends import (
    BackendPoolConfig,
    ChatPool,
    EndpointConfig,
    MockChatTransport,
    MockSearchTransport,
    RetryConfig,
    SearchPool,
)
from .demo import DemoSearchIndex, demo_chat_script
from .pipeline import PipelineConfig, VerificationPipeline
from .reward import RewardEngine
from .types import RewardConfig


class ConfigError(ValueError):
    """The runtime config file is missing, unreadable, or inconsistent."""


_KNOWN_KEYS = {
    "backend",
    "llm_endpoints", "llm_base_url", "llm_api_key_env", "llm_model",
    "search_base_url", "search_api_key_env",
    "judge_base_url", "judge_api_key_env", "judge_model",
    "max_in_flight", "request_timeout",
    "retry_max_attempts", "retry_base_backoff", "retry_jitter",
    "cache_dir",
    "reward_lambda", "reward_mu", "malformed_penalty",
    "context_radius", "max_claims_per_response", "dedupe", "evidence_top_k",
    "bind_address", "max_concurrent_requests", "max_body_bytes", "auth_token_env",
    "mock_latency_llm", "mock_latency_search", "mock_seed",
}


@dataclass
class RuntimeConfig:
    backend: str = "mock"
    llm_endpoints: list[EndpointConfig] = field(default_factory=list)
    search_endpoint: Optional[EndpointConfig] = None
    judge_endpoint: Optional[EndpointConfig] = None
    max_in_flight: int = 16
    request_timeout: float = 60.0
    retry: RetryConfig = field(default_factory=RetryConfig)
    cache_dir: Optional[Path] = None
    reward: RewardConfig = field(default_factory=RewardConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    bind_address: str = "127.0.0.1:8080"
    max_concurrent_requests: int = 64
    max_body_bytes: int = 4 * 1024 * 1024
    auth_token_env: Optional[str] = None
    mock_latency_llm: float = 0.0
    mock_latency_search: float = 0.0
    mock_seed: int = 0

    @property
    def host(self) -> str:
        return self.bind_address.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.bind_address.rsplit(":", 1)[1])


def load_config(path: str | Path) -> RuntimeConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return parse_config(data)


def parse_config(data: dict[str, Any]) -> RuntimeConfig:
    unknown = sorted(set(data) - _KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    backend = data.get("backend", "mock")
    if backend not in ("mock", "http"):
        raise ConfigError(f"backend must be 'mock' or 'http', got {backend!r}")

    endpoints: list[EndpointConfig] = []
    if "llm_endpoints" in data:
        for entry in data["llm_endpoints"]:
            endpoints.append(
                EndpointConfig(
                    base_url=entry["base_url"],
                    api_key_env_var=entry.get("api_key_env"),
                    model_name=entry.get("model", ""),
                )
            )
    elif "llm_base_url" in data:
        endpoints.append(
            EndpointConfig(
                base_url=data["llm_base_url"],
                api_key_env_var=data.get("llm_api_key_env"),
                model_name=data.get("llm_model", ""),
            )
        )
    if backend == "http" and not endpoints:
        raise ConfigError("http backend requires llm_base_url or llm_endpoints")

    search_endpoint = None
    if "search_base_url" in data:
        search_endpoint = EndpointConfig(
            base_url=data["search_base_url"], api_key_env_var=data.get("search_api_key_env")
        )
    if backend == "http" and search_endpoint is None:
        raise ConfigError("http backend requires search_base_url")

    judge_endpoint = None
    if "judge_base_url" in data:
        judge_endpoint = EndpointConfig(
            base_url=data["judge_base_url"],
            api_key_env_var=data.get("judge_api_key_env"),
            model_name=data.get("judge_model", ""),
        )

    try:
        reward = RewardConfig(
            lambda_=float(data.get("reward_lambda", 0.0)),
            mu=float(data.get("reward_mu", 0.1)),
            malformed_penalty=float(data.get("malformed_penalty", -1.0)),
        )
        pipeline = PipelineConfig(
            context_radius=int(data.get("context_radius", 1)),
            max_claims_per_response=int(data.get("max_claims_per_response", 200)),
            dedupe=bool(data.get("dedupe", True)),
            evidence_top_k=int(data.get("evidence_top_k", 10)),
        )
        retry = RetryConfig(
            max_attempts=int(data.get("retry_max_attempts", 3)),
            base_backoff=float(data.get("retry_base_backoff", 0.2)),
            jitter=float(data.get("retry_jitter", 0.05)),
        )
        config = RuntimeConfig(
            backend=backend,
            llm_endpoints=endpoints,
            search_endpoint=search_endpoint,
            judge_endpoint=judge_endpoint,
            max_in_flight=int(data.get("max_in_flight", 16)),
            request_timeout=float(data.get("request_timeout", 60.0)),
            retry=retry,
            cache_dir=Path(data["cache_dir"]) if data.get("cache_dir") else None,
            reward=reward,
            pipeline=pipeline,
            bind_address=str(data.get("bind_address", "127.0.0.1:8080")),
            max_concurrent_requests=int(data.get("max_concurrent_requests", 64)),
            max_body_bytes=int(data.get("max_body_bytes", 4 * 1024 * 1024)),
            auth_token_env=data.get("auth_token_env"),
            mock_latency_llm=float(data.get("mock_latency_llm", 0.0)),
            mock_latency_search=float(data.get("mock_latency_search", 0.0)),
            mock_seed=int(data.get("mock_seed", 0)),
        )
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc

    if config.max_concurrent_requests < 1:
        raise ConfigError("max_concurrent_requests must be >= 1")
    try:
        config.port
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"bind_address must look like host:port: {exc}") from exc
    return config


@dataclass
class Stack:
    """Assembled runtime: pools, pipeline, and reward engine."""

    config: RuntimeConfig
    chat_pool: ChatPool
    search_pool: SearchPool
    judge_pool: ChatPool
    pipeline: VerificationPipeline
    engine: RewardEngine


def build_stack(config: RuntimeConfig) -> Stack:
    pool_config = BackendPoolConfig(
        endpoints=tuple(config.llm_endpoints) or (EndpointConfig(base_url="mock://llm", model_name="mock-llm"),),
        max_in_flight=config.max_in_flight,
        per_request_timeout=config.request_timeout,
        retry=config.retry,
        cache_dir=config.cache_dir,
    )
    search_pool_config = BackendPoolConfig(
        endpoints=(config.search_endpoint or EndpointConfig(base_url="mock://search"),),
        max_in_flight=config.max_in_flight,
        per_request_timeout=config.request_timeout,
        retry=config.retry,
        cache_dir=config.cache_dir,
    )
    if config.backend == "mock":
        chat_pool = ChatPool(
            pool_config,
            transport=MockChatTransport(demo_chat_script, latency=config.mock_latency_llm, seed=config.mock_seed),
        )
        search_pool = SearchPool(
            search_pool_config,
            transport=MockSearchTransport(DemoSearchIndex(), latency=config.mock_latency_search),
        )
        judge_pool = chat_pool
    else:
        chat_pool = ChatPool(pool_config)
        search_pool = SearchPool(search_pool_config)
        if config.judge_endpoint is not None:
            judge_pool_config = BackendPoolConfig(
                endpoints=(config.judge_endpoint,),
                max_in_flight=config.max_in_flight,
                per_request_timeout=config.request_timeout,
                retry=config.retry,
                cache_dir=config.cache_dir,
            )
            judge_pool = ChatPool(judge_pool_config)
        else:
            judge_pool = chat_pool

    pipeline = VerificationPipeline(chat_pool, search_pool, config.pipeline)
    engine = RewardEngine(pipeline, judge_pool, config.reward)
    return Stack(
        config=config,
        chat_pool=chat_pool,
        search_pool=search_pool,
        judge_pool=judge_pool,
        pipeline=pipeline,
        engine=engine,
    )
