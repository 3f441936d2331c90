"""Reward/verification HTTP service for RL training workers.

JSON over HTTP, bounded admission (429 once ``max_concurrent_requests`` are
in flight), optional bearer-token auth, and a metrics endpoint. Numeric
results are exactly the library's: handlers call the same engine objects.
"""

from __future__ import annotations

import asyncio
import hashlib
import logging
import math
import os
import statistics
import time
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .config import RuntimeConfig, Stack, build_stack
from .reward import RewardTimings, RewardUnavailable
from .types import RewardConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
_EXEMPT_PATHS = ("/healthz", "/metrics")


@dataclass
class ServerMetrics:
    requests_total: int = 0
    responses_by_status: dict[str, int] = field(default_factory=dict)
    stage_latencies: dict[str, list[float]] = field(default_factory=dict)
    max_latency_samples: int = 2048

    def record_status(self, status: int) -> None:
        key = str(status)
        self.responses_by_status[key] = self.responses_by_status.get(key, 0) + 1

    def record_latency(self, stage: str, seconds: float) -> None:
        bucket = self.stage_latencies.setdefault(stage, [])
        if len(bucket) >= self.max_latency_samples:
            del bucket[: self.max_latency_samples // 2]
        bucket.append(seconds)

    def latency_summary(self) -> dict[str, dict[str, float]]:
        summary = {}
        for stage, samples in self.stage_latencies.items():
            if not samples:
                continue
            ordered = sorted(samples)
            p50 = statistics.median(ordered)
            p95 = ordered[min(len(ordered) - 1, int(0.95 * len(ordered)))]
            summary[stage] = {"p50_ms": 1000 * p50, "p95_ms": 1000 * p95, "count": len(ordered)}
        return summary


class RewardBody(BaseModel):
    prompt: str
    response: str
    lambda_: Optional[float] = Field(default=None, alias="lambda")
    mu: Optional[float] = None
    seed: Optional[int] = None

    model_config = {"populate_by_name": True}


class ScoreBody(BaseModel):
    text: str
    seed: Optional[int] = None


class RewardBatchBody(BaseModel):
    items: list[RewardBody]
    seed: Optional[int] = None


def _error_response(status: int, kind: str, message: str, request_id: str = "", **headers: str) -> JSONResponse:
    response = JSONResponse(
        status_code=status,
        content={"error": {"kind": kind, "message": message}, "request_id": request_id},
    )
    for name, value in headers.items():
        response.headers[name.replace("_", "-")] = value
    return response


def _request_id(seed: Optional[int], payload: str) -> str:
    if seed is None:
        return uuid.uuid4().hex
    digest = hashlib.sha256(f"{seed}:{payload}".encode("utf-8")).hexdigest()[:16]
    return f"req-{seed}-{digest}"


def _merged_config(defaults: RewardConfig, body: RewardBody) -> RewardConfig:
    lambda_ = defaults.lambda_ if body.lambda_ is None else body.lambda_
    mu = defaults.mu if body.mu is None else body.mu
    for value in (lambda_, mu):
        if value is not None and not math.isfinite(value):
            raise ValueError("reward weight overrides must be finite")
    return RewardConfig(lambda_=lambda_, mu=mu, malformed_penalty=defaults.malformed_penalty)


def _timings_json(timings: RewardTimings) -> dict[str, float]:
    return {
        "pipeline_ms": 1000 * timings.pipeline_s,
        "judge_ms": 1000 * timings.judge_s,
        "total_ms": 1000 * timings.total_s,
    }


def create_app(stack: Stack) -> FastAPI:
    """Build the ASGI app around an assembled stack (pools, pipeline, engine)."""
    config = stack.config
    auth_token: Optional[str] = None
    if config.auth_token_env:
        auth_token = os.environ.get(config.auth_token_env)
        if not auth_token:
            raise ValueError(
                f"auth_token_env {config.auth_token_env!r} is configured but the variable is not set"
            )

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        logger.info("reward service listening on %s", config.bind_address)
        yield
        app.state.draining = True
        logger.info("reward service draining")

    app = FastAPI(title="factreward", version=__version__, lifespan=lifespan)
    app.state.stack = stack
    app.state.draining = False
    app.state.active = 0
    app.state.metrics = ServerMetrics()

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError) -> JSONResponse:
        errors = exc.errors()
        if errors:
            first = errors[0]
            loc = [str(part) for part in first.get("loc", ()) if part != "body"]
            if first.get("type") == "missing" and loc:
                message = f"missing field {'.'.join(loc)!r}"
            elif loc:
                message = f"invalid field {'.'.join(loc)!r}: {first.get('msg', 'bad value')}"
            else:
                message = first.get("msg", "malformed body")
        else:
            message = "malformed body"
        app.state.metrics.record_status(400)
        return _error_response(400, "bad_request", message)

    @app.middleware("http")
    async def gatekeeper(request: Request, call_next):
        metrics: ServerMetrics = app.state.metrics
        metrics.requests_total += 1
        if request.url.path in _EXEMPT_PATHS:
            return await call_next(request)
        if app.state.draining:
            metrics.record_status(503)
            return _error_response(503, "draining", "server is draining; retry elsewhere")
        declared = request.headers.get("content-length")
        if declared and declared.isdigit() and int(declared) > config.max_body_bytes:
            metrics.record_status(413)
            return _error_response(413, "body_too_large", f"body exceeds {config.max_body_bytes} bytes")
        if auth_token is not None:
            supplied = request.headers.get("authorization", "")
            if supplied != f"Bearer {auth_token}":
                metrics.record_status(401)
                return _error_response(401, "unauthorized", "missing or invalid bearer token")
        if app.state.active >= config.max_concurrent_requests:
            metrics.record_status(429)
            return _error_response(
                429, "over_capacity", "too many concurrent requests", retry_after="1"
            )
        app.state.active += 1
        try:
            response = await call_next(request)
        finally:
            app.state.active -= 1
        metrics.record_status(response.status_code)
        response.headers["X-Schema-Version"] = SCHEMA_VERSION
        return response

    async def _reward_one(body: RewardBody) -> tuple[dict, RewardTimings]:
        reward_config = _merged_config(config.reward, body)
        breakdown, timings = await stack.engine.reward_of_timed_async(
            body.prompt, body.response, reward_config
        )
        payload = {
            "r_fact": breakdown.r_fact,
            "r_dtl": breakdown.r_dtl,
            "r_rel": breakdown.r_rel,
            "total": breakdown.total,
            "malformed": breakdown.malformed,
            "judge_unparseable": breakdown.judge_unparseable,
        }
        return payload, timings

    @app.post("/v1/reward")
    async def reward(body: RewardBody) -> JSONResponse:
        request_id = _request_id(body.seed, body.prompt + "\x00" + body.response)
        try:
            payload, timings = await asyncio.wait_for(_reward_one(body), timeout=config.request_timeout)
        except ValueError as exc:
            return _error_response(400, "bad_request", str(exc), request_id)
        except RewardUnavailable as exc:
            return _error_response(502, "backend_exhaustion", str(exc), request_id)
        except asyncio.TimeoutError:
            return _error_response(502, "backend_timeout", "reward computation timed out", request_id)
        app.state.metrics.record_latency("pipeline", timings.pipeline_s)
        app.state.metrics.record_latency("judge", timings.judge_s)
        payload.update({"request_id": request_id, "timings": _timings_json(timings)})
        logger.info(
            "access %s",
            {
                "endpoint": "/v1/reward",
                "request_id": request_id,
                "total": payload["total"],
                "malformed": payload["malformed"],
                "pipeline_ms": round(1000 * timings.pipeline_s, 1),
                "judge_ms": round(1000 * timings.judge_s, 1),
            },
        )
        return JSONResponse(payload)

    @app.post("/v1/score")
    async def score(body: ScoreBody) -> JSONResponse:
        request_id = _request_id(body.seed, body.text)
        response_id = "s-" + hashlib.sha256(body.text.encode("utf-8")).hexdigest()[:12]
        started = time.perf_counter()
        try:
            result = await asyncio.wait_for(
                stack.pipeline.score_answer_async(response_id, body.text),
                timeout=config.request_timeout,
            )
        except RewardUnavailable as exc:
            return _error_response(502, "backend_exhaustion", str(exc), request_id)
        except asyncio.TimeoutError:
            return _error_response(502, "backend_timeout", "scoring timed out", request_id)
        except Exception as exc:  # PipelineError
            return _error_response(502, "backend_exhaustion", str(exc), request_id)
        elapsed = time.perf_counter() - started
        app.state.metrics.record_latency("pipeline", elapsed)
        logger.info(
            "access %s",
            {
                "endpoint": "/v1/score",
                "request_id": request_id,
                "supported": result.supported,
                "total": result.total,
                "pipeline_ms": round(1000 * elapsed, 1),
            },
        )
        return JSONResponse(
            {
                "supported": result.supported,
                "total": result.total,
                "precision": result.precision,
                "smoothed_precision": result.smoothed_precision,
                "request_id": request_id,
                "timings": {"pipeline_ms": 1000 * elapsed},
            }
        )

    @app.post("/v1/reward_batch")
    async def reward_batch(body: RewardBatchBody) -> JSONResponse:
        request_id = _request_id(body.seed, f"batch:{len(body.items)}")

        async def one(item: RewardBody) -> dict:
            try:
                payload, timings = await _reward_one(item)
            except ValueError as exc:
                return {"error": {"kind": "bad_request", "message": str(exc)}}
            except RewardUnavailable as exc:
                return {"error": {"kind": "backend_exhaustion", "message": str(exc)}}
            app.state.metrics.record_latency("pipeline", timings.pipeline_s)
            return payload

        try:
            results = await asyncio.wait_for(
                asyncio.gather(*[one(item) for item in body.items]),
                timeout=config.request_timeout,
            )
        except asyncio.TimeoutError:
            return _error_response(502, "backend_timeout", "batch timed out", request_id)
        return JSONResponse({"results": list(results), "request_id": request_id})

    @app.get("/healthz")
    async def healthz() -> JSONResponse:
        reachability = {
            "chat": await stack.chat_pool.ping(),
            "search": await stack.search_pool.ping(),
            "judge": await stack.judge_pool.ping(),
        }
        if app.state.draining:
            status = "draining"
        elif all(reachability.values()):
            status = "ok"
        else:
            status = "degraded"
        body = {
            "status": status,
            "backend_reachability": reachability,
            "unreachable": sorted(name for name, up in reachability.items() if not up),
            "version": __version__,
        }
        response = JSONResponse(body)
        response.headers["X-Schema-Version"] = SCHEMA_VERSION
        return response

    @app.get("/metrics")
    async def metrics() -> JSONResponse:
        m: ServerMetrics = app.state.metrics
        pools = {
            "chat": stack.chat_pool.stats.__dict__,
            "search": stack.search_pool.stats.__dict__,
        }
        if stack.judge_pool is not stack.chat_pool:
            pools["judge"] = stack.judge_pool.stats.__dict__
        body = {
            "requests_total": m.requests_total,
            "responses_by_status": m.responses_by_status,
            "in_flight": app.state.active,
            "stage_latency": m.latency_summary(),
            "backend_pools": pools,
        }
        response = JSONResponse(body)
        response.headers["X-Schema-Version"] = SCHEMA_VERSION
        return response

    return app


def create_app_from_config(config: RuntimeConfig) -> FastAPI:
    return create_app(build_stack(config))


def run_server(config: RuntimeConfig) -> None:
    """Blocking entry point: serve until SIGINT/SIGTERM, then drain and exit 0.

    Runs uvicorn off the main thread so signal handling stays here: on a
    signal the server finishes in-flight requests and this call returns
    normally instead of re-raising the signal.
    """
    import signal
    import threading

    import uvicorn

    app = create_app_from_config(config)
    server = uvicorn.Server(
        uvicorn.Config(app, host=config.host, port=config.port, log_level="info", access_log=False)
    )
    failure: list[BaseException] = []

    def _serve() -> None:
        try:
            server.run()
        except BaseException as exc:  # noqa: BLE001 - reported to the caller below
            failure.append(exc)

    thread = threading.Thread(target=_serve, name="uvicorn", daemon=True)
    thread.start()

    stop = threading.Event()

    def _handle(signum, frame):  # noqa: ARG001
        stop.set()

    for sig in (signal.SIGTERM, signal.SIGINT):
        try:
            signal.signal(sig, _handle)
        except ValueError:  # not in the main thread; rely on uvicorn's own handling
            pass

    while thread.is_alive() and not stop.wait(timeout=0.1):
        pass
    if thread.is_alive():
        server.should_exit = True
        thread.join(timeout=30)
    if failure and not stop.is_set():
        raise RuntimeError(f"server failed: {failure[0]}") from failure[0]
