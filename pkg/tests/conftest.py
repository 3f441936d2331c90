"""Shared mock builders for the test suite.

Tests inject minimal prompt templates ("{sentence}", "{claim}\\n{evidence}")
so mock scripts can key directly on stage inputs instead of parsing the
shipped production templates.
"""

from __future__ import annotations

import pytest

from factreward.backends import mock_llm, mock_search
from factreward.pipeline import PipelineConfig, VerificationPipeline
from factreward.reward import RewardEngine
from factreward.types import EvidenceSnippet, RewardConfig

MINIMAL_TEMPLATES = dict(
    extractor_prompt_template="{sentence}",
    verifier_prompt_template="{claim}\n---\n{evidence}",
)

# Criterion results reported by tests/test_acceptance.py; echoed after the
# run so they show without -s.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def minimal_pipeline_config(**overrides) -> PipelineConfig:
    args = dict(MINIMAL_TEMPLATES)
    args.update(overrides)
    return PipelineConfig(**args)


def echo_extractor_verifier(req):
    """Extraction echoes the sentence as one claim; claims containing the
    token 'true' verify as supported."""
    if req.request_tag == "claim_extraction":
        return req.last_user_content()
    if req.request_tag == "claim_verification":
        claim = req.last_user_content().split("\n---\n")[0]
        return "checked.\nSUPPORTED" if "true" in claim else "checked.\nUNSUPPORTED"
    if req.request_tag == "relevance_judge":
        return "my own answer would be fine. <answer> [[B]] </answer>"
    return ""


def make_pipeline(script=echo_extractor_verifier, *, latency=0.0, search_latency=0.0,
                  max_in_flight=8, config=None, search_index=None) -> VerificationPipeline:
    return VerificationPipeline(
        mock_llm(script, latency=latency, max_in_flight=max_in_flight),
        mock_search(search_index, latency=search_latency, max_in_flight=max_in_flight),
        config or minimal_pipeline_config(),
    )


def make_engine(script=echo_extractor_verifier, *, reward_config=None, judge_script=None,
                **pipeline_kwargs) -> RewardEngine:
    pipeline = make_pipeline(script, **pipeline_kwargs)
    judge_pool = mock_llm(judge_script if judge_script is not None else script)
    return RewardEngine(pipeline, judge_pool, reward_config or RewardConfig())


@pytest.fixture
def fixture_snippets():
    return [
        EvidenceSnippet(title=f"Doc {i}", url=f"https://example.org/{i}", snippet=f"snippet {i}")
        for i in range(10)
    ]


class FakeScorePipeline:
    """Pipeline stand-in returning preset supported/total counts.

    The answer text encodes the counts as ``F=<n>;T=<n>`` so reward tests can
    drive any combination without mock plumbing.
    """

    async def score_answer_async(self, response_id, answer, diagnostics=None):
        from factreward.types import FactualityScore

        if not answer.strip():
            return FactualityScore(response_id=response_id, supported=0, total=0)
        parts = dict(item.split("=", 1) for item in answer.strip().split(";"))
        supported, total = int(parts["F"]), int(parts["T"])
        return FactualityScore(response_id=response_id, supported=supported, total=total)
