"""Client round-trip against a live mock-backend server, plus scripted-server paths.

The live server is started through its public CLI; expected numeric values
come from the primary library configured identically, so the round trip
checks client decode fidelity end to end.
"""

import json
import random
import signal
import socket
import subprocess
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from factreward_client import (
    AuthError,
    BatchItemError,
    ClientConfig,
    NetworkError,
    RewardClient,
    SchemaMismatchError,
    ServerError,
)


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture(scope="module")
def live_server(tmp_path_factory):
    port = free_port()
    config_path = tmp_path_factory.mktemp("server") / "config.yaml"
    config_path.write_text(
        f"backend: mock\nbind_address: 127.0.0.1:{port}\nreward_lambda: 0.01\nreward_mu: 0.1\n",
        encoding="utf-8",
    )
    proc = subprocess.Popen(
        [sys.executable, "-m", "factreward.cli", "serve", "--config", str(config_path)],
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        text=True,
    )
    base_url = f"http://127.0.0.1:{port}"
    client = RewardClient(base_url, timeout=30.0)
    deadline = time.time() + 30
    ready = False
    while time.time() < deadline:
        try:
            if client.health().status == "ok":
                ready = True
                break
        except (NetworkError, ServerError):
            time.sleep(0.1)
    client.close()
    if not ready:
        proc.kill()
        raise RuntimeError("server never became healthy")
    yield base_url
    proc.send_signal(signal.SIGTERM)
    try:
        proc.wait(timeout=15)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait()


def library_engine():
    """The primary stack configured exactly like the live server."""
    from factreward.config import RuntimeConfig, build_stack
    from factreward.types import RewardConfig

    return build_stack(
        RuntimeConfig(backend="mock", reward=RewardConfig(lambda_=0.01, mu=0.1))
    ).engine


def fixture_corpus(n=50):
    rng = random.Random(321)
    corpus = []
    for i in range(n):
        if i % 5 == 4:
            corpus.append((f"question {i}", f"malformed rollout {i} with no tags"))
            continue
        sentences = " ".join(
            f"Statement {i}-{j} covers detail number {rng.randint(0, 999)}."
            for j in range(rng.randint(1, 4))
        )
        corpus.append((f"question {i}", f"<think>trace {i}</think><answer>{sentences}</answer>"))
    return corpus


# -- live-server round trips ---------------------------------------------------


def test_round_trip_reproduces_library_rewards(live_server):
    engine = library_engine()
    corpus = fixture_corpus(50)
    with RewardClient(live_server, timeout=60.0) as client:
        for prompt, raw in corpus:
            expected = engine.reward_of(prompt, raw)
            got = client.reward(prompt, raw)
            assert got.total == expected.total
            assert got.r_fact == expected.r_fact
            assert got.r_dtl == expected.r_dtl
            assert got.r_rel == expected.r_rel
            assert got.malformed == expected.malformed
            assert got.request_id


def test_malformed_round_trip_is_penalty(live_server):
    with RewardClient(live_server) as client:
        got = client.reward("q", "<think>thought only</think>")
    assert got.malformed is True
    assert got.total == -1.0


def test_score_round_trip(live_server):
    with RewardClient(live_server) as client:
        empty = client.score("")
        assert (empty.supported, empty.total) == (0, 0)
        assert empty.precision is None
        scored = client.score("The tower is 330 meters tall. It opened in 1889.")
        assert scored.total >= 1
        assert scored.smoothed_precision == scored.supported / (scored.total + 1)


def test_batch_order_alignment(live_server):
    corpus = fixture_corpus(8)
    with RewardClient(live_server, timeout=60.0) as client:
        singles = [client.reward(prompt, raw) for prompt, raw in corpus]
        batch = client.reward_batch(corpus)
    assert len(batch) == len(corpus)
    for single, item in zip(singles, batch):
        assert not isinstance(item, BatchItemError)
        assert item.total == single.total


def test_reward_many_helper(live_server):
    corpus = fixture_corpus(6)
    with RewardClient(live_server, timeout=60.0) as client:
        results = client.reward_many(corpus, max_workers=3)
        singles = [client.reward(prompt, raw) for prompt, raw in corpus]
    assert [r.total for r in results] == [s.total for s in singles]


def test_health_and_weight_overrides(live_server):
    with RewardClient(live_server) as client:
        health = client.health()
        assert health.status == "ok"
        assert health.version
        raw = "<think>t</think><answer>A plain statement sits here.</answer>"
        base = client.reward("q", raw, lambda_=0.0, mu=0.0)
        boosted = client.reward("q", raw, lambda_=1.0, mu=0.0)
        assert boosted.total >= base.total


# -- scripted-server paths -------------------------------------------------------


class ScriptedHandler(BaseHTTPRequestHandler):
    script = []  # list of (status, headers, body_dict) consumed per request
    seen = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        ScriptedHandler.seen.append(self.rfile.read(length))
        status, headers, body = (
            ScriptedHandler.script.pop(0) if ScriptedHandler.script else (500, {}, {"error": {}})
        )
        payload = json.dumps(body).encode("utf-8")
        self.send_response(status)
        for name, value in headers.items():
            self.send_header(name, value)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def scripted_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), ScriptedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    ScriptedHandler.script = []
    ScriptedHandler.seen = []
    yield server, f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    thread.join(timeout=5)


GOOD_REWARD = {
    "r_fact": 0.5, "r_dtl": 0.0, "r_rel": 1.0, "total": 0.6,
    "malformed": False, "judge_unparseable": False, "request_id": "req-1",
}


def test_retry_on_429_honors_retry_after(scripted_server):
    _, url = scripted_server
    ScriptedHandler.script = [
        (429, {"Retry-After": "0.2", "X-Schema-Version": "1"}, {"error": {"kind": "over_capacity", "message": "busy"}}),
        (200, {"X-Schema-Version": "1"}, GOOD_REWARD),
    ]
    client = RewardClient(url, max_retries=2)
    started = time.perf_counter()
    got = client.reward("q", "r")
    elapsed = time.perf_counter() - started
    assert got.total == 0.6
    assert len(ScriptedHandler.seen) == 2  # exactly one retry
    assert elapsed >= 0.2  # waited at least Retry-After
    client.close()


def test_retries_exhausted_raises_server_error(scripted_server):
    _, url = scripted_server
    ScriptedHandler.script = [
        (503, {"X-Schema-Version": "1"}, {"error": {"kind": "down", "message": "nope"}})
    ] * 3
    client = RewardClient(url, max_retries=2)
    with pytest.raises(ServerError) as excinfo:
        client.reward("q", "r")
    assert excinfo.value.status == 503
    assert len(ScriptedHandler.seen) == 3
    client.close()


def test_schema_version_mismatch_is_loud(scripted_server):
    _, url = scripted_server
    ScriptedHandler.script = [(200, {"X-Schema-Version": "999"}, GOOD_REWARD)]
    client = RewardClient(url, max_retries=0)
    with pytest.raises(SchemaMismatchError):
        client.reward("q", "r")
    client.close()


def test_auth_error_is_typed(scripted_server):
    _, url = scripted_server
    ScriptedHandler.script = [(401, {"X-Schema-Version": "1"}, {"error": {"kind": "unauthorized", "message": "no"}})]
    client = RewardClient(url, max_retries=2)
    with pytest.raises(AuthError):
        client.reward("q", "r")
    assert len(ScriptedHandler.seen) == 1  # 401 is not retried
    client.close()


def test_bad_request_not_retried(scripted_server):
    _, url = scripted_server
    ScriptedHandler.script = [
        (400, {"X-Schema-Version": "1"}, {"error": {"kind": "bad_request", "message": "missing field 'response'"}})
    ]
    client = RewardClient(url, max_retries=3)
    with pytest.raises(ServerError) as excinfo:
        client.reward("q", "r")
    assert excinfo.value.status == 400
    assert "response" in str(excinfo.value)
    assert len(ScriptedHandler.seen) == 1
    client.close()


def test_network_error_when_unreachable():
    client = RewardClient(f"http://127.0.0.1:{free_port()}", max_retries=1, timeout=2.0)
    with pytest.raises(NetworkError):
        client.reward("q", "r")
    client.close()


def test_config_validation():
    with pytest.raises(ValueError):
        ClientConfig(base_url="not a url")
    with pytest.raises(ValueError):
        ClientConfig(base_url="ftp://wrong.example")
    config = ClientConfig(base_url="http://127.0.0.1:1234", max_retries=0)
    assert config.timeout == 60.0


def test_auth_token_header_sent(scripted_server, monkeypatch):
    monkeypatch.setenv("FACTREWARD_API_TOKEN", "env-token")
    _, url = scripted_server
    ScriptedHandler.script = [(200, {"X-Schema-Version": "1"}, GOOD_REWARD)]
    client = RewardClient(url, max_retries=0)
    client.reward("q", "r")
    assert client._http.headers["Authorization"] == "Bearer env-token"
    client.close()
