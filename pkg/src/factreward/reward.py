"""Three-part factuality reward: format gate, smoothed precision, log-discounted
detail, and an LLM-judged relevance indicator.

For a well-formed response the total is
``supported/(total+1) + lambda*ln(1+supported) + mu*relevance``; anything that
fails the think/answer format gets the flat malformed penalty instead.
"""

from __future__ import annotations

import asyncio
import hashlib
import logging
import math
import re
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from .assets import load_prompt, render
from .backends import BackendError, ChatPool, ChatRequest
from .pipeline import Diagnostics, PipelineError, VerificationPipeline
from .types import RewardBreakdown, RewardConfig, parse_response

logger = logging.getLogger(__name__)

_VERDICT_TAG = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)


class JudgeUnparseable(RuntimeError):
    """The judge reply carried no usable verdict tag, even after one retry."""


class RewardUnavailable(RuntimeError):
    """The verification pipeline failed outright; the sample must be skipped,
    never scored as the malformed penalty."""


@dataclass(frozen=True)
class JudgeVerdict:
    winner: str  # "given_better" | "own_better"
    raw_reply: str


@dataclass(frozen=True)
class RewardTimings:
    pipeline_s: float = 0.0
    judge_s: float = 0.0
    total_s: float = 0.0


def _parse_judge_reply(reply: str) -> Optional[str]:
    matches = _VERDICT_TAG.findall(reply)
    if not matches:
        return None
    content = matches[-1]
    has_a = "[[A]]" in content
    has_b = "[[B]]" in content
    if has_a == has_b:
        return None
    return "given_better" if has_a else "own_better"


class RewardEngine:
    """Computes reward breakdowns from a verification pipeline and a judge pool.

    The pipeline and judge calls for one item are independent and run in
    parallel; the judge is skipped entirely when the relevance weight is zero.
    """

    def __init__(
        self,
        pipeline: VerificationPipeline,
        judge_pool: ChatPool,
        config: Optional[RewardConfig] = None,
        *,
        judge_max_tokens: int = 2048,
        judge_failure_fatal: bool = False,
    ):
        self.pipeline = pipeline
        self.judge_pool = judge_pool
        self.config = config or RewardConfig()
        self.judge_template = load_prompt("relevance_judge")
        self.judge_max_tokens = judge_max_tokens
        self.judge_failure_fatal = judge_failure_fatal

    # -- relevance judge -------------------------------------------------

    def _judge_request(self, question: str, answer: str) -> ChatRequest:
        prompt = render(self.judge_template, instruction=question, response=answer)
        return ChatRequest.user(prompt, max_tokens=self.judge_max_tokens, request_tag="relevance_judge")

    async def judge_relevance_async(self, question: str, answer: str) -> JudgeVerdict:
        """One judge call; the judge writes its own answer then compares. Retries once."""
        request = self._judge_request(question, answer)
        last_reply = ""
        for _ in range(2):
            (reply,) = await self.judge_pool.chat_batch([request])
            if isinstance(reply, BackendError):
                last_reply = reply.message
                continue
            last_reply = reply
            winner = _parse_judge_reply(reply)
            if winner is not None:
                return JudgeVerdict(winner=winner, raw_reply=reply)
        raise JudgeUnparseable(f"no [[A]]/[[B]] verdict in judge reply: {last_reply[:200]!r}")

    def judge_relevance(self, question: str, answer: str) -> JudgeVerdict:
        return asyncio.run(self.judge_relevance_async(question, answer))

    # -- reward ----------------------------------------------------------

    async def reward_of_async(
        self,
        prompt: str,
        raw_response: str,
        config: Optional[RewardConfig] = None,
    ) -> RewardBreakdown:
        breakdown, _ = await self.reward_of_timed_async(prompt, raw_response, config)
        return breakdown

    async def reward_of_timed_async(
        self,
        prompt: str,
        raw_response: str,
        config: Optional[RewardConfig] = None,
    ) -> tuple[RewardBreakdown, RewardTimings]:
        cfg = config or self.config
        started = time.perf_counter()
        parsed = parse_response(raw_response)
        if not parsed.well_formed:
            total_s = time.perf_counter() - started
            return (
                RewardBreakdown(total=cfg.malformed_penalty, malformed=True),
                RewardTimings(total_s=total_s),
            )

        response_id = "r-" + hashlib.sha256(raw_response.encode("utf-8")).hexdigest()[:12]
        diagnostics = Diagnostics()

        async def run_pipeline() -> tuple[object, float]:
            t0 = time.perf_counter()
            score = await self.pipeline.score_answer_async(response_id, parsed.answer or "", diagnostics)
            return score, time.perf_counter() - t0

        async def run_judge() -> tuple[Optional[Union[JudgeVerdict, JudgeUnparseable]], float]:
            if cfg.mu == 0:
                return None, 0.0
            t0 = time.perf_counter()
            try:
                verdict = await self.judge_relevance_async(prompt, parsed.answer or "")
            except JudgeUnparseable as exc:
                return exc, time.perf_counter() - t0
            return verdict, time.perf_counter() - t0

        try:
            (score, pipeline_s), (judge_outcome, judge_s) = await asyncio.gather(run_pipeline(), run_judge())
        except PipelineError as exc:
            raise RewardUnavailable(str(exc)) from exc

        judge_unparseable = False
        if isinstance(judge_outcome, JudgeUnparseable):
            if self.judge_failure_fatal:
                raise judge_outcome
            judge_unparseable = True
            r_rel = 0.0
        elif judge_outcome is None:
            r_rel = 0.0
        else:
            r_rel = 1.0 if judge_outcome.winner == "given_better" else 0.0

        r_fact = score.supported / (score.total + 1)
        r_dtl = math.log(1 + score.supported)
        total = r_fact + cfg.lambda_ * r_dtl + cfg.mu * r_rel
        timings = RewardTimings(
            pipeline_s=pipeline_s, judge_s=judge_s, total_s=time.perf_counter() - started
        )
        return (
            RewardBreakdown(
                r_fact=r_fact,
                r_dtl=r_dtl,
                r_rel=r_rel,
                total=total,
                malformed=False,
                judge_unparseable=judge_unparseable,
            ),
            timings,
        )

    def reward_of(self, prompt: str, raw_response: str, config: Optional[RewardConfig] = None) -> RewardBreakdown:
        return asyncio.run(self.reward_of_async(prompt, raw_response, config))

    async def reward_batch_async(
        self,
        items: Sequence[tuple[str, str]],
        config: Optional[RewardConfig] = None,
    ) -> list[Union[RewardBreakdown, RewardUnavailable]]:
        """Order-aligned batch; per-item failures come back as error values."""

        async def one(prompt: str, raw: str) -> Union[RewardBreakdown, RewardUnavailable]:
            try:
                return await self.reward_of_async(prompt, raw, config)
            except RewardUnavailable as exc:
                return exc

        return list(await asyncio.gather(*[one(prompt, raw) for prompt, raw in items]))

    def reward_batch(
        self,
        items: Sequence[tuple[str, str]],
        config: Optional[RewardConfig] = None,
    ) -> list[Union[RewardBreakdown, RewardUnavailable]]:
        return asyncio.run(self.reward_batch_async(items, config))
