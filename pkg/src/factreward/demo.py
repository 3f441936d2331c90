"""Stage-aware deterministic mock behavior for running the full stack offline.

The demo chat script inspects each request's stage tag and produces replies
that satisfy that stage's output grammar (claims per line, SUPPORTED /
UNSUPPORTED verdicts, [[A]]/[[B]] judgments, tagged prompts, analysis JSON),
keyed only on request content so results are reproducible anywhere.
"""

from __future__ import annotations

import hashlib
import json

from .backends import ChatRequest
from .pipeline import NO_CLAIM_SENTINEL
from .types import EvidenceSnippet

_STRATEGY_POOL = (
    "summarization",
    "self-verification",
    "backtracking",
    "synthesis",
    "comparison",
    "definition",
    "explanation",
    "decomposition",
)


def _digest(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def _between(content: str, start_marker: str, end_marker: str | None = None) -> str:
    start = content.rfind(start_marker)
    if start == -1:
        return content
    start += len(start_marker)
    if end_marker is None:
        return content[start:].strip()
    end = content.find(end_marker, start)
    return content[start : end if end != -1 else len(content)].strip()


def _extraction_reply(content: str) -> str:
    sentence = _between(content, "Sentence:")
    if len(sentence.split()) < 3:
        return NO_CLAIM_SENTINEL
    return sentence


def _verification_reply(content: str) -> str:
    claim = _between(content, "Claim:", "Evidence:")
    supported = _digest("verify:" + claim) % 3 != 0  # roughly two thirds supported
    label = "SUPPORTED" if supported else "UNSUPPORTED"
    return f"Checked the claim against the evidence.\n{label}"


def _judge_reply(content: str) -> str:
    question = _between(content, "[User Question]", "[The Start")
    answer = _between(content, "[The Start of the Assistant's Answer]", "[The End")
    given_better = _digest("judge:" + question + "|" + answer) % 2 == 0
    verdict = "[[A]]" if given_better else "[[B]]"
    return f"My own response would cover the same ground.\n<answer> {verdict} </answer>"


def _pairwise_reply(content: str) -> str:
    a = _between(content, "[The Start of Output (a)]", "[The End of Output (a)]")
    b = _between(content, "[The Start of Output (b)]", "[The End of Output (b)]")
    prefer_a = _digest("pair:" + a + "|" + b) % 2 == 0
    verdict = "[[A]]" if prefer_a else "[[B]]"
    return f"Both outputs address the instruction.\n<answer> {verdict} </answer>"


def _generation_reply(content: str) -> str:
    token = _digest("gen:" + content) % 100000
    return f"<new_prompt>How does municipal water treatment plant number {token} purify drinking water?</new_prompt>"


def _analysis_reply(content: str) -> str:
    seed = _digest("cot:" + content)
    strategies = sorted({_STRATEGY_POOL[(seed >> (4 * i)) % len(_STRATEGY_POOL)] for i in range(3)})
    payload = {"reasoning_strategies": strategies, "helpfulness_score": 7 + seed % 3}
    return json.dumps(payload)


def _sft_reply(content: str) -> str:
    question = content.rsplit("User:", 1)[-1].strip()
    seed = _digest("sft:" + question)
    n_facts = 2 + seed % 3
    facts = " ".join(
        f"Point {i + 1} about this topic is detail {(seed >> (3 * i)) % 97}." for i in range(n_facts)
    )
    return f"<think>Recalling what I know about: {question[:80]}. Double-checking the specifics.</think>\n<answer>{facts}</answer>"


def demo_chat_script(request: ChatRequest) -> str:
    """Deterministic reply for any pipeline stage, keyed on request content."""
    content = request.last_user_content()
    tag = request.request_tag
    if tag == "claim_extraction":
        return _extraction_reply(content)
    if tag == "claim_verification":
        return _verification_reply(content)
    if tag == "relevance_judge":
        return _judge_reply(content)
    if tag == "pairwise_judge":
        return _pairwise_reply(content)
    if tag == "prompt_generation":
        return _generation_reply(content)
    if tag == "cot_analysis":
        return _analysis_reply(content)
    if tag == "sft_generation":
        return _sft_reply(content)
    return f"reply-{_digest('generic:' + content):x}"


def demo_search_index_factory() -> "DemoSearchIndex":
    return DemoSearchIndex()


class DemoSearchIndex(dict):
    """Mapping that fabricates a stable snippet list for any query."""

    def get(self, query, default=None):  # type: ignore[override]
        seed = _digest("search:" + str(query))
        return [
            EvidenceSnippet(
                title=f"Reference {(seed >> (8 * i)) % 1000}",
                url=f"https://example.org/doc/{(seed >> (8 * i)) % 1000}",
                snippet=f"Background snippet {i + 1} related to: {str(query)[:80]}",
            )
            for i in range(3)
        ]

    def __contains__(self, query) -> bool:  # noqa: D105
        return True
