"""Batch CLI subcommands: exit codes, file outputs, determinism, serve lifecycle."""

import json
import signal
import subprocess
import sys
import time

import pytest

from conftest import echo_extractor_verifier, minimal_pipeline_config

from factreward import cli
from factreward.backends import mock_llm, mock_search
from factreward.config import RuntimeConfig, Stack
from factreward.pipeline import VerificationPipeline
from factreward.records import read_records, write_records
from factreward.reward import RewardEngine
from factreward.types import FactualityScore, PreferencePair, PromptRecord, ResponseRecord, RewardConfig


@pytest.fixture
def mock_config(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("backend: mock\n", encoding="utf-8")
    return str(path)


def wf(answer):
    return f"<think>t</think><answer>{answer}</answer>"


def patched_stack(monkeypatch, llm_script, reward_config=None):
    chat_pool = mock_llm(llm_script)
    search_pool = mock_search()
    pipeline = VerificationPipeline(chat_pool, search_pool, minimal_pipeline_config())
    engine = RewardEngine(pipeline, chat_pool, reward_config or RewardConfig())
    stack = Stack(
        config=RuntimeConfig(backend="mock"), chat_pool=chat_pool, search_pool=search_pool,
        judge_pool=chat_pool, pipeline=pipeline, engine=engine,
    )
    monkeypatch.setattr(cli, "_load_stack", lambda config_path: stack)
    return stack


# -- score -------------------------------------------------------------------


def test_score_three_responses(tmp_path, mock_config):
    responses = [
        ResponseRecord(id=f"r{i}", prompt_id=f"p{i}", raw=wf(f"Fact {i} is clearly stated here."))
        for i in range(3)
    ]
    write_records(tmp_path / "in.jsonl", responses)
    out = tmp_path / "out.jsonl"
    code = cli.main(["score", "--input", str(tmp_path / "in.jsonl"), "--output", str(out),
                     "--config", mock_config])
    assert code == 0
    scores = read_records(out, FactualityScore)
    assert len(scores) == 3
    assert {s.response_id for s in scores} == {"r0", "r1", "r2"}


def test_score_shard_partition(tmp_path, mock_config):
    responses = [
        ResponseRecord(id=f"r{i}", prompt_id=f"p{i}", raw=wf(f"Fact number {i} appears here."))
        for i in range(12)
    ]
    write_records(tmp_path / "in.jsonl", responses)

    def run_shard(spec, name):
        out = tmp_path / name
        code = cli.main(["score", "--input", str(tmp_path / "in.jsonl"), "--output", str(out),
                         "--config", mock_config] + (["--shard", spec] if spec else []))
        assert code == 0
        return set(out.read_text(encoding="utf-8").splitlines())

    full = run_shard(None, "full.jsonl")
    part0 = run_shard("0/2", "s0.jsonl")
    part1 = run_shard("1/2", "s1.jsonl")
    assert part0 | part1 == full
    assert part0 & part1 == set()


def test_score_empty_input(tmp_path, mock_config):
    (tmp_path / "in.jsonl").write_text("", encoding="utf-8")
    out = tmp_path / "out.jsonl"
    code = cli.main(["score", "--input", str(tmp_path / "in.jsonl"), "--output", str(out),
                     "--config", mock_config])
    assert code == 0
    assert out.read_text(encoding="utf-8") == ""


def test_score_bad_shard_spec(tmp_path, mock_config):
    (tmp_path / "in.jsonl").write_text("", encoding="utf-8")
    code = cli.main(["score", "--input", str(tmp_path / "in.jsonl"), "--output",
                     str(tmp_path / "out.jsonl"), "--config", mock_config, "--shard", "2/2"])
    assert code == 2


# -- eval --------------------------------------------------------------------


@pytest.fixture
def eval_manifest(tmp_path):
    prompts = [PromptRecord(id=f"p{i}", text=f"question {i}") for i in range(4)]
    responses = [
        ResponseRecord(id=f"r{i}", prompt_id=f"p{i}", raw=wf(f"Statement {i} is written here. Another {i}."))
        for i in range(4)
    ]
    baseline = [
        ResponseRecord(id=f"b{i}", prompt_id=f"p{i}", raw=f"baseline text {i}") for i in range(4)
    ]
    write_records(tmp_path / "prompts.jsonl", prompts)
    write_records(tmp_path / "responses.jsonl", responses)
    write_records(tmp_path / "baseline.jsonl", baseline)
    manifest = tmp_path / "manifest.yaml"
    manifest.write_text(
        "name: demo\nprompts_path: prompts.jsonl\nresponses_path: responses.jsonl\n"
        "baseline_responses_path: baseline.jsonl\n",
        encoding="utf-8",
    )
    return manifest


def test_eval_writes_report_and_table(tmp_path, mock_config, eval_manifest):
    out_prefix = tmp_path / "run"
    code = cli.main(["eval", "--manifest", str(eval_manifest), "--config", mock_config,
                     "--output", str(out_prefix)])
    assert code == 0
    table = (tmp_path / "run.table.txt").read_text(encoding="utf-8")
    assert "Pre." in table and "Dtl." in table and "WR" in table
    lines = (tmp_path / "run.report.jsonl").read_text(encoding="utf-8").splitlines()
    summary = json.loads(lines[0])
    assert summary["n_prompts"] == 4


def test_eval_rerun_is_byte_identical(tmp_path, mock_config, eval_manifest):
    def run(prefix):
        code = cli.main(["eval", "--manifest", str(eval_manifest), "--config", mock_config,
                         "--win-rate", "--seed", "7", "--output", str(tmp_path / prefix)])
        assert code == 0
        return (tmp_path / f"{prefix}.report.jsonl").read_bytes()

    assert run("one") == run("two")


def test_eval_win_rate_requires_baseline(tmp_path, mock_config):
    prompts = [PromptRecord(id="p0", text="q")]
    responses = [ResponseRecord(id="r0", prompt_id="p0", raw="text")]
    write_records(tmp_path / "p.jsonl", prompts)
    write_records(tmp_path / "r.jsonl", responses)
    manifest = tmp_path / "m.yaml"
    manifest.write_text("name: x\nprompts_path: p.jsonl\nresponses_path: r.jsonl\n", encoding="utf-8")
    code = cli.main(["eval", "--manifest", str(manifest), "--config", mock_config, "--win-rate"])
    assert code == 2


# -- dpo-pairs ------------------------------------------------------------------


def candidate_line(prompt_id, response_id, precision, answer_length):
    return json.dumps({
        "prompt_id": prompt_id, "response_id": response_id,
        "precision": precision, "answer_length": answer_length,
    })


def test_dpo_pairs_fixture(tmp_path, capsys):
    lines = [
        candidate_line("p1", "r1", 0.9, 100),
        candidate_line("p1", "r2", 0.75, 105),
        candidate_line("p1", "r3", 0.5, 200),
    ]
    (tmp_path / "cands.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    out = tmp_path / "pairs.jsonl"
    code = cli.main(["dpo-pairs", "--input", str(tmp_path / "cands.jsonl"),
                     "--tau-m", "0.1", "--tau-l", "0.1", "--output", str(out)])
    assert code == 0
    pairs = read_records(out, PreferencePair)
    assert len(pairs) == 1
    assert (pairs[0].chosen_id, pairs[0].rejected_id) == ("r1", "r2")
    assert "kept 1 pairs, dropped 0" in capsys.readouterr().out


def test_dpo_pairs_all_identical_drops_prompt(tmp_path, capsys):
    lines = [candidate_line("p1", f"r{i}", 0.8, 100) for i in range(4)]
    (tmp_path / "cands.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    out = tmp_path / "pairs.jsonl"
    code = cli.main(["dpo-pairs", "--input", str(tmp_path / "cands.jsonl"), "--output", str(out)])
    assert code == 0
    assert read_records(out, PreferencePair) == []
    assert "dropped 1" in capsys.readouterr().out


def test_dpo_pairs_default_thresholds(tmp_path):
    # margin 0.12 passes the default tau_m=0.1; margin 0.08 does not.
    lines = [
        candidate_line("keep", "a", 0.82, 100), candidate_line("keep", "b", 0.70, 100),
        candidate_line("drop", "c", 0.78, 100), candidate_line("drop", "d", 0.70, 100),
    ]
    (tmp_path / "cands.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    out = tmp_path / "pairs.jsonl"
    assert cli.main(["dpo-pairs", "--input", str(tmp_path / "cands.jsonl"), "--output", str(out)]) == 0
    pairs = read_records(out, PreferencePair)
    assert [p.prompt_id for p in pairs] == ["keep"]


# -- gen-prompts -----------------------------------------------------------------


def seed_files(tmp_path, n_factual=3, n_diverse=5):
    factual = [PromptRecord(id=f"f{i}", text=f"factual seed {i}") for i in range(n_factual)]
    diverse = [PromptRecord(id=f"d{i}", text=f"diverse seed {i}") for i in range(n_diverse)]
    write_records(tmp_path / "factual.jsonl", factual)
    write_records(tmp_path / "diverse.jsonl", diverse)
    return str(tmp_path / "factual.jsonl"), str(tmp_path / "diverse.jsonl")


def test_gen_prompts_demo_backend(tmp_path, mock_config):
    factual, diverse = seed_files(tmp_path)
    out = tmp_path / "gen.jsonl"
    code = cli.main(["gen-prompts", "--factual-seeds", factual, "--diverse-seeds", diverse,
                     "--n", "5", "--output", str(out), "--config", mock_config,
                     "--seed", "3", "--split-ratio", "3:4"])
    assert code == 0
    records = read_records(out, PromptRecord)
    assert 1 <= len(records) <= 5
    assert all(r.text for r in records)
    assert len({r.text for r in records}) == len(records)  # deduped
    assert {r.split.value for r in records} <= {"sft", "rl"}


def test_gen_prompts_pool_too_small(tmp_path, mock_config):
    factual, diverse = seed_files(tmp_path, n_factual=1)
    code = cli.main(["gen-prompts", "--factual-seeds", factual, "--diverse-seeds", diverse,
                     "--n", "2", "--output", str(tmp_path / "o.jsonl"), "--config", mock_config])
    assert code == 2


def test_gen_prompts_tagless_replies_skipped(tmp_path, monkeypatch, capsys):
    patched_stack(monkeypatch, llm_script="no tags in this reply at all")
    factual, diverse = seed_files(tmp_path)
    out = tmp_path / "gen.jsonl"
    code = cli.main(["gen-prompts", "--factual-seeds", factual, "--diverse-seeds", diverse,
                     "--n", "3", "--output", str(out), "--config", "ignored"])
    assert code == 0
    assert read_records(out, PromptRecord) == []
    assert "skipped 3" in capsys.readouterr().out


def test_gen_prompts_tag_extraction(tmp_path, monkeypatch):
    patched_stack(monkeypatch, llm_script="sure!\n<new_prompt>What makes rain fall?</new_prompt>")
    factual, diverse = seed_files(tmp_path)
    out = tmp_path / "gen.jsonl"
    code = cli.main(["gen-prompts", "--factual-seeds", factual, "--diverse-seeds", diverse,
                     "--n", "4", "--output", str(out), "--config", "ignored"])
    assert code == 0
    records = read_records(out, PromptRecord)
    assert len(records) == 1  # identical texts dedupe to one
    assert records[0].text == "What makes rain fall?"


# -- sft-sample -------------------------------------------------------------------


def score_of(response_id, supported, total):
    return (response_id, FactualityScore(response_id=response_id, supported=supported, total=total))


def test_select_sft_target_argmax():
    # smoothed precisions 0.5, 0.9, 0.7 -> the second response wins.
    scored = [score_of("s0", 1, 1), score_of("s1", 9, 9), score_of("s2", 7, 9)]
    assert cli.select_sft_target(scored) == "s1"


def test_select_sft_target_tie_breaks_on_supported():
    # equal smoothed precision 0.8: supported 4/hidden total 4 (4/5) vs 8 (8/10).
    scored = [score_of("low", 4, 4), score_of("high", 8, 9)]
    assert cli.select_sft_target(scored) == "high"
    # full tie -> lexicographic id
    scored = [score_of("b", 4, 4), score_of("a", 4, 4)]
    assert cli.select_sft_target(scored) == "a"


def test_select_sft_target_raw_precision_mode():
    scored = [score_of("dense", 19, 20), score_of("tiny", 1, 1)]
    assert cli.select_sft_target(scored) == "dense"          # smoothed: 19/21 > 1/2
    assert cli.select_sft_target(scored, raw_precision=True) == "tiny"  # raw: 1.0 > 0.95


def test_sft_sample_end_to_end(tmp_path, mock_config):
    prompts = [PromptRecord(id=f"p{i}", text=f"Tell me about topic {i}") for i in range(2)]
    write_records(tmp_path / "prompts.jsonl", prompts)
    out = tmp_path / "sft.jsonl"
    code = cli.main(["sft-sample", "--prompts", str(tmp_path / "prompts.jsonl"), "--k", "3",
                     "--output", str(out), "--config", mock_config])
    assert code == 0
    chosen = read_records(out, ResponseRecord)
    assert len(chosen) == 2
    from factreward.types import parse_response

    assert all(parse_response(r.raw).well_formed for r in chosen)


def test_sft_sample_k1_and_all_malformed(tmp_path, monkeypatch, capsys):
    calls = {"n": 0}

    def script(req):
        calls["n"] += 1
        if req.request_tag == "sft_generation":
            return "never well formed"
        return echo_extractor_verifier(req)

    patched_stack(monkeypatch, llm_script=script)
    prompts = [PromptRecord(id="p0", text="q")]
    write_records(tmp_path / "prompts.jsonl", prompts)
    out = tmp_path / "sft.jsonl"
    code = cli.main(["sft-sample", "--prompts", str(tmp_path / "prompts.jsonl"), "--k", "1",
                     "--output", str(out), "--config", "ignored"])
    assert code == 0
    assert read_records(out, ResponseRecord) == []
    assert "skipped 1" in capsys.readouterr().out


# -- analyze-cot --------------------------------------------------------------------


def test_analyze_cot_outputs_two_csvs(tmp_path, mock_config):
    rollouts = [
        ResponseRecord(id=f"r{i}", prompt_id=f"p{i}", raw=wf(f"answer {i}"))
        for i in range(2)
    ]
    write_records(tmp_path / "rollouts.jsonl", rollouts)
    out = tmp_path / "strategies.csv"
    code = cli.main(["analyze-cot", "--rollouts", str(tmp_path / "rollouts.jsonl"),
                     "--top", "20", "--output", str(out), "--config", mock_config])
    assert code == 0
    strategies = out.read_text(encoding="utf-8").splitlines()
    assert strategies[0] == "strategy,count"
    assert len(strategies) > 1
    hist = (tmp_path / "strategies.lengths.csv").read_text(encoding="utf-8").splitlines()
    assert hist[0] == "bin_start,bin_end,count"


def test_analyze_cot_top_truncates(tmp_path, monkeypatch):
    payload = json.dumps({"reasoning_strategies": [f"s{i}" for i in range(9)], "helpfulness_score": 8})
    patched_stack(monkeypatch, llm_script=payload)
    rollouts = [ResponseRecord(id="r0", prompt_id="p0", raw=wf("a"))]
    write_records(tmp_path / "rollouts.jsonl", rollouts)
    out = tmp_path / "s.csv"
    code = cli.main(["analyze-cot", "--rollouts", str(tmp_path / "rollouts.jsonl"),
                     "--top", "5", "--output", str(out), "--config", "ignored"])
    assert code == 0
    assert len(out.read_text(encoding="utf-8").splitlines()) == 1 + 5


def test_analyze_cot_empty_input(tmp_path, mock_config):
    (tmp_path / "rollouts.jsonl").write_text("", encoding="utf-8")
    out = tmp_path / "s.csv"
    code = cli.main(["analyze-cot", "--rollouts", str(tmp_path / "rollouts.jsonl"),
                     "--output", str(out), "--config", mock_config])
    assert code == 0
    assert out.read_text(encoding="utf-8") == "strategy,count\n"
    assert (tmp_path / "s.lengths.csv").read_text(encoding="utf-8") == "bin_start,bin_end,count\n"


# -- serve -----------------------------------------------------------------------


def _wait_for_line(stream, needle, timeout=20.0):
    deadline = time.time() + timeout
    collected = []
    while time.time() < deadline:
        line = stream.readline()
        if not line:
            time.sleep(0.05)
            continue
        collected.append(line)
        if needle in line:
            return collected
    raise AssertionError(f"never saw {needle!r} in serve output: {collected}")


def test_serve_lifecycle(tmp_path):
    config = tmp_path / "serve.yaml"
    config.write_text("backend: mock\nbind_address: 127.0.0.1:8973\n", encoding="utf-8")
    proc = subprocess.Popen(
        [sys.executable, "-m", "factreward.cli", "serve", "--config", str(config)],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
    )
    try:
        _wait_for_line(proc.stdout, "127.0.0.1:8973")
        proc.send_signal(signal.SIGTERM)
        code = proc.wait(timeout=15)
        assert code == 0
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()


def test_serve_bad_config(tmp_path):
    config = tmp_path / "bad.yaml"
    config.write_text("backend: mock\nnot_a_real_key: 1\n", encoding="utf-8")
    result = subprocess.run(
        [sys.executable, "-m", "factreward.cli", "serve", "--config", str(config)],
        capture_output=True, text=True, timeout=30,
    )
    assert result.returncode != 0
    assert "not_a_real_key" in result.stderr


def test_serve_missing_config_file():
    result = subprocess.run(
        [sys.executable, "-m", "factreward.cli", "serve", "--config", "/nonexistent/x.yaml"],
        capture_output=True, text=True, timeout=30,
    )
    assert result.returncode != 0
    assert "error:" in result.stderr


def test_serve_port_in_use_exits_nonzero(tmp_path):
    import socket

    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    blocker.listen(1)
    port = blocker.getsockname()[1]
    try:
        config = tmp_path / "serve.yaml"
        config.write_text(f"backend: mock\nbind_address: 127.0.0.1:{port}\n", encoding="utf-8")
        result = subprocess.run(
            [sys.executable, "-m", "factreward.cli", "serve", "--config", str(config)],
            capture_output=True, text=True, timeout=30,
        )
        assert result.returncode != 0
        assert "error:" in result.stderr
    finally:
        blocker.close()
