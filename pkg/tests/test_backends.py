"""Fan-out pool contracts: ordering, retries, concurrency bounds, caching, mocks."""

import asyncio
import time

from factreward.backends import (
    BackendError,
    ChatRequest,
    ErrorKind,
    SearchRequest,
    TransportStatusError,
    mock_llm,
    mock_search,
)


def reqs(*contents):
    return [ChatRequest.user(c) for c in contents]


def test_batch_preserves_input_order():
    pool = mock_llm({"a": "ra", "b": "rb", "c": "rc"})
    replies = pool.chat_batch_sync(reqs("a", "b", "c"))
    assert replies == ["ra", "rb", "rc"]


def test_retry_after_transient_500():
    pool = mock_llm("ok", fail_plan=[TransportStatusError(500)], max_attempts=3)
    (reply,) = pool.chat_batch_sync(reqs("x"))
    assert reply == "ok"
    assert pool.stats.retries == 1


def test_permanent_400_fails_without_retry():
    pool = mock_llm("ok", fail_plan=[TransportStatusError(400)], max_attempts=3)
    (reply,) = pool.chat_batch_sync(reqs("x"))
    assert isinstance(reply, BackendError)
    assert reply.kind is ErrorKind.HTTP_STATUS
    assert reply.status == 400
    assert reply.attempts == 1


def test_retries_exhausted_yields_error_value():
    pool = mock_llm("ok", fail_plan=[TransportStatusError(503)] * 5, max_attempts=2)
    (reply,) = pool.chat_batch_sync(reqs("x"))
    assert isinstance(reply, BackendError)
    assert reply.kind is ErrorKind.RETRIES_EXHAUSTED
    assert reply.attempts == 2


def test_per_item_failure_isolation():
    # Second call in arrival order fails permanently; siblings succeed.
    pool = mock_llm("ok", fail_plan=[None, TransportStatusError(404)], max_in_flight=1)
    replies = pool.chat_batch_sync(reqs("a", "b", "c"))
    assert replies[0] == "ok"
    assert isinstance(replies[1], BackendError)
    assert replies[2] == "ok"
    assert len(replies) == 3


def test_result_length_matches_under_injected_failures():
    plan = [TransportStatusError(500), None, TransportStatusError(401), None] * 4
    pool = mock_llm("ok", fail_plan=plan, max_in_flight=2)
    replies = pool.chat_batch_sync(reqs(*[f"q{i}" for i in range(8)]))
    assert len(replies) == 8


def test_in_flight_limit_bounds_wall_time():
    # 64 requests at 100 ms with 8 slots: about ceil(64/8) * 100 ms.
    pool = mock_llm("ok", latency=0.1, max_in_flight=8)
    started = time.perf_counter()
    replies = pool.chat_batch_sync(reqs(*[f"q{i}" for i in range(64)]))
    elapsed = time.perf_counter() - started
    assert all(r == "ok" for r in replies)
    assert 0.8 <= elapsed <= 2.0, elapsed


def test_mock_latency_is_honored():
    pool = mock_llm("ok", latency=0.2)
    started = time.perf_counter()
    pool.chat_batch_sync(reqs("x"))
    elapsed = time.perf_counter() - started
    assert 0.18 <= elapsed <= 0.35, elapsed


def test_mock_determinism_same_seed_same_transcript():
    requests = reqs("alpha", "beta", "gamma")
    first = mock_llm(seed=42).chat_batch_sync(requests)
    second = mock_llm(seed=42).chat_batch_sync(requests)
    third = mock_llm(seed=43).chat_batch_sync(requests)
    assert first == second
    assert first != third


def test_search_fixture_echo_and_truncation(fixture_snippets):
    pool = mock_search({"known query": fixture_snippets})
    (hits,) = pool.search_batch_sync([SearchRequest("known query", top_k=3)])
    assert len(hits) == 3
    assert hits == tuple(fixture_snippets[:3])


def test_search_unknown_query_returns_empty_not_error():
    pool = mock_search({})
    (hits,) = pool.search_batch_sync([SearchRequest("nobody asked this")])
    assert hits == ()


def test_cache_hit_skips_network(tmp_path, fixture_snippets):
    pool = mock_search({"q": fixture_snippets}, cache_dir=tmp_path / "cache")
    first = pool.search_batch_sync([SearchRequest("q", top_k=2)])
    calls_after_first = pool.transport.calls
    second = pool.search_batch_sync([SearchRequest("q", top_k=2)])
    assert pool.transport.calls == calls_after_first
    assert pool.stats.cache_hits == 1
    assert first == second


def test_chat_cache_counts_no_extra_network(tmp_path):
    pool = mock_llm("fixed", cache_dir=tmp_path / "cache")
    pool.chat_batch_sync(reqs("same"))
    pool.chat_batch_sync(reqs("same"))
    assert pool.transport.calls == 1
    assert pool.stats.cache_hits == 1


def test_concurrent_batches_share_global_limit():
    pool = mock_llm("ok", latency=0.1, max_in_flight=4)

    async def run():
        started = time.perf_counter()
        await asyncio.gather(
            pool.chat_batch(reqs(*[f"a{i}" for i in range(4)])),
            pool.chat_batch(reqs(*[f"b{i}" for i in range(4)])),
        )
        return time.perf_counter() - started

    elapsed = asyncio.run(run())
    # 8 requests over 4 global slots: two 100 ms waves, not one.
    assert elapsed >= 0.19, elapsed
