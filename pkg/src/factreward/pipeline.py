"""Claim verification engine: answer -> sentences -> claims -> evidence -> verdicts.

Each stage is batched toward the backend pools (all extraction requests in
flight together, then all searches, then all verifications), so wall time for
one response is a handful of round trips instead of one per claim.
"""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .assets import load_prompt, render
from .backends import BackendError, ChatPool, ChatRequest, SearchPool, SearchRequest
from .types import Claim, EvidenceBundle, FactualityScore, Verdict, VerdictLabel

logger = logging.getLogger(__name__)

NO_CLAIM_SENTINEL = "No verifiable claim."
SEARCH_QUERY_MAX_CHARS = 256

SUPPORTED_LABEL = "SUPPORTED"
UNSUPPORTED_LABEL = "UNSUPPORTED"
VERIFICATION_UNAVAILABLE = "verification_unavailable"


class PipelineError(RuntimeError):
    """Raised when an entire pipeline stage failed (not per-item degradation)."""


@dataclass(frozen=True)
class PipelineConfig:
    extractor_prompt_template: str = field(default_factory=lambda: load_prompt("claim_extraction"))
    verifier_prompt_template: str = field(default_factory=lambda: load_prompt("claim_verification"))
    context_radius: int = 1
    max_claims_per_response: int = 200
    dedupe: bool = True
    evidence_top_k: int = 10

    def __post_init__(self) -> None:
        if self.context_radius < 0:
            raise ValueError("context_radius must be >= 0")
        if self.max_claims_per_response < 1:
            raise ValueError("max_claims_per_response must be >= 1")


@dataclass
class Diagnostics:
    """Per-invocation trouble log: which items degraded and why."""

    events: list[dict] = field(default_factory=list)

    def record(self, stage: str, kind: str, detail: str, item: Optional[str] = None) -> None:
        event = {"stage": stage, "kind": kind, "detail": detail, "item": item}
        self.events.append(event)
        logger.warning("pipeline diagnostic: %s", event)


# Words that end with a period without ending a sentence.
_ABBREVIATIONS = frozenset(
    {
        "dr", "mr", "mrs", "ms", "prof", "rev", "gen", "sen", "rep", "gov", "sgt", "capt", "lt", "col",
        "jr", "sr", "st", "mt", "ft", "vs", "etc", "approx", "dept", "est", "min", "max", "no", "vol",
        "fig", "al", "inc", "ltd", "co", "corp", "ave", "blvd", "rd",
        "e.g", "i.e", "cf", "u.s", "u.k", "u.n", "a.m", "p.m", "ph.d", "b.c", "a.d",
    }
)

_OPENERS = "([{"
_CLOSERS = ")]}"
_TERMINALS = ".!?"
_TRAILERS = "\"')]}’”"


def _ends_with_abbreviation(text: str) -> bool:
    # Token immediately before the final period, lowercased, sans the period.
    token = text.rstrip().rsplit(None, 1)[-1] if text.strip() else ""
    token = token.rstrip(".").lstrip("(\"'‘“")
    return token.lower() in _ABBREVIATIONS


def segment_sentences(answer: str) -> list[str]:
    """Split an answer into sentences on terminal punctuation and newlines.

    Deterministic rule set: [.!?] runs close a sentence when followed by
    whitespace or end of text, except after known abbreviations and inside
    bracketed or double-quoted spans; newlines always close a sentence.
    Every returned sentence is a contiguous substring of the answer, and the
    gaps between consecutive sentences are whitespace-only.
    """
    sentences: list[str] = []
    start = 0
    depth = 0
    in_quote = False
    i = 0
    n = len(answer)

    def emit(end: int) -> None:
        nonlocal start
        piece = answer[start:end].strip()
        if piece:
            sentences.append(piece)
        start = end

    while i < n:
        ch = answer[i]
        if ch == "\n":
            emit(i)
            depth = 0
            in_quote = False
            i += 1
            continue
        if ch == '"':
            in_quote = not in_quote
        elif ch in _OPENERS:
            depth += 1
        elif ch in _CLOSERS:
            depth = max(0, depth - 1)
        elif ch in _TERMINALS and depth == 0 and not in_quote:
            j = i + 1
            while j < n and answer[j] in _TERMINALS:
                j += 1
            while j < n and answer[j] in _TRAILERS:
                j += 1
            if j >= n or answer[j].isspace():
                if ch == "." and answer[i:j].strip(".") == "" and _ends_with_abbreviation(answer[start : i + 1]):
                    i = j
                    continue
                emit(j)
                i = j
                continue
        i += 1
    emit(n)
    return sentences


def _parse_extractor_reply(reply: str) -> list[str]:
    claims = []
    for line in reply.splitlines():
        text = line.strip()
        if not text:
            continue
        if text.rstrip(".").casefold() == NO_CLAIM_SENTINEL.rstrip(".").casefold():
            continue
        claims.append(text)
    return claims


def _parse_verifier_reply(reply: str) -> Optional[VerdictLabel]:
    lines = [line.strip() for line in reply.splitlines() if line.strip()]
    if not lines:
        return None
    final = lines[-1]
    # UNSUPPORTED contains SUPPORTED as a substring, so check it first.
    if UNSUPPORTED_LABEL in final:
        return VerdictLabel.UNSUPPORTED
    if SUPPORTED_LABEL in final:
        return VerdictLabel.SUPPORTED
    return None


def _format_evidence(bundle: EvidenceBundle) -> str:
    if not bundle.snippets:
        return "(no evidence found)"
    lines = []
    for snippet in bundle.snippets:
        lines.append(f"- {snippet.title} ({snippet.url}): {snippet.snippet}")
    return "\n".join(lines)


class VerificationPipeline:
    """Scores a response's answer segment by extracting and verifying its claims.

    Safe to invoke concurrently for many responses; total in-flight external
    calls are bounded globally by the backend pools.
    """

    def __init__(
        self,
        chat_pool: ChatPool,
        search_pool: SearchPool,
        config: Optional[PipelineConfig] = None,
    ):
        self.chat_pool = chat_pool
        self.search_pool = search_pool
        self.config = config or PipelineConfig()

    # -- extraction ------------------------------------------------------

    def _context_window(self, sentences: Sequence[str], index: int) -> str:
        radius = self.config.context_radius
        lo = max(0, index - radius)
        hi = min(len(sentences), index + radius + 1)
        return " ".join(sentences[lo:hi])

    async def extract_claims_async(
        self,
        response_id: str,
        sentences: Sequence[str],
        diagnostics: Optional[Diagnostics] = None,
    ) -> list[Claim]:
        """One extraction request per sentence, dispatched as a single batch."""
        if not sentences:
            return []
        diagnostics = diagnostics if diagnostics is not None else Diagnostics()
        requests = [
            ChatRequest.user(
                render(
                    self.config.extractor_prompt_template,
                    context=self._context_window(sentences, i),
                    sentence=sentence,
                ),
                request_tag="claim_extraction",
            )
            for i, sentence in enumerate(sentences)
        ]
        replies = await self.chat_pool.chat_batch(requests)
        if all(isinstance(r, BackendError) for r in replies):
            raise PipelineError(f"claim extraction failed for every sentence of {response_id!r}")

        raw: list[tuple[int, str]] = []
        for i, reply in enumerate(replies):
            if isinstance(reply, BackendError):
                diagnostics.record("extract", reply.kind.value, reply.message, item=f"sentence:{i}")
                continue
            for text in _parse_extractor_reply(reply):
                raw.append((i, text))

        if self.config.dedupe:
            seen: set[str] = set()
            deduped = []
            for i, text in raw:
                key = text.casefold()
                if key in seen:
                    continue
                seen.add(key)
                deduped.append((i, text))
            raw = deduped

        if len(raw) > self.config.max_claims_per_response:
            diagnostics.record(
                "extract",
                "truncated",
                f"{len(raw)} claims exceeded cap {self.config.max_claims_per_response}",
                item=response_id,
            )
            raw = raw[: self.config.max_claims_per_response]

        return [
            Claim(
                id=f"{response_id}:c{k}",
                response_id=response_id,
                sentence_index=i,
                text=text,
                context_window=self._context_window(sentences, i),
            )
            for k, (i, text) in enumerate(raw)
        ]

    def extract_claims(self, response_id: str, sentences: Sequence[str]) -> list[Claim]:
        return asyncio.run(self.extract_claims_async(response_id, sentences))

    # -- evidence search ---------------------------------------------------

    async def search_evidence_async(
        self,
        claims: Sequence[Claim],
        diagnostics: Optional[Diagnostics] = None,
    ) -> dict[str, EvidenceBundle]:
        """One search per claim (query = claim text, truncated); failures yield empty bundles."""
        diagnostics = diagnostics if diagnostics is not None else Diagnostics()
        if not claims:
            return {}
        requests = [
            SearchRequest(query=claim.text[:SEARCH_QUERY_MAX_CHARS], top_k=self.config.evidence_top_k)
            for claim in claims
        ]
        results = await self.search_pool.search_batch(requests)
        bundles: dict[str, EvidenceBundle] = {}
        now = time.time()
        for claim, result in zip(claims, results):
            if isinstance(result, BackendError):
                diagnostics.record("search", result.kind.value, result.message, item=claim.id)
                bundles[claim.id] = EvidenceBundle(claim_id=claim.id, snippets=(), fetched_at=now)
            else:
                bundles[claim.id] = EvidenceBundle(claim_id=claim.id, snippets=tuple(result), fetched_at=now)
        return bundles

    # -- verification ------------------------------------------------------

    def _verify_request(self, claim: Claim, bundle: EvidenceBundle) -> ChatRequest:
        return ChatRequest.user(
            render(self.config.verifier_prompt_template, claim=claim.text, evidence=_format_evidence(bundle)),
            request_tag="claim_verification",
        )

    async def verify_claims_async(
        self,
        claims: Sequence[Claim],
        evidence: dict[str, EvidenceBundle],
        diagnostics: Optional[Diagnostics] = None,
    ) -> list[Verdict]:
        """Exactly one verdict per claim; unparseable or failed checks are conservative."""
        if not claims:
            return []
        diagnostics = diagnostics if diagnostics is not None else Diagnostics()
        for claim in claims:
            if claim.id not in evidence:
                raise ValueError(f"claim {claim.id!r} has no evidence bundle")

        requests = [self._verify_request(claim, evidence[claim.id]) for claim in claims]
        replies = await self.chat_pool.chat_batch(requests)
        if all(isinstance(r, BackendError) for r in replies):
            raise PipelineError("claim verification failed for every claim")

        labels: list[Optional[VerdictLabel]] = []
        rationales: list[Optional[str]] = []
        retry_indices: list[int] = []
        for i, reply in enumerate(replies):
            if isinstance(reply, BackendError):
                labels.append(VerdictLabel.UNSUPPORTED)
                rationales.append(VERIFICATION_UNAVAILABLE)
                diagnostics.record("verify", reply.kind.value, reply.message, item=claims[i].id)
                continue
            label = _parse_verifier_reply(reply)
            if label is None:
                labels.append(None)
                rationales.append(reply)
                retry_indices.append(i)
            else:
                labels.append(label)
                rationales.append(reply)

        if retry_indices:
            retry_replies = await self.chat_pool.chat_batch([requests[i] for i in retry_indices])
            for i, reply in zip(retry_indices, retry_replies):
                if isinstance(reply, BackendError):
                    labels[i] = VerdictLabel.UNSUPPORTED
                    rationales[i] = VERIFICATION_UNAVAILABLE
                    diagnostics.record("verify", reply.kind.value, reply.message, item=claims[i].id)
                    continue
                label = _parse_verifier_reply(reply)
                if label is None:
                    labels[i] = VerdictLabel.UNSUPPORTED
                    rationales[i] = reply
                    diagnostics.record("verify", "unparseable", "no verdict label after re-ask", item=claims[i].id)
                else:
                    labels[i] = label
                    rationales[i] = reply

        return [
            Verdict(claim_id=claim.id, label=label or VerdictLabel.UNSUPPORTED, rationale=rationale)
            for claim, label, rationale in zip(claims, labels, rationales)
        ]

    def verify_claims(self, claims: Sequence[Claim], evidence: dict[str, EvidenceBundle]) -> list[Verdict]:
        return asyncio.run(self.verify_claims_async(claims, evidence))

    # -- end to end --------------------------------------------------------

    async def score_answer_async(
        self,
        response_id: str,
        answer: str,
        diagnostics: Optional[Diagnostics] = None,
    ) -> FactualityScore:
        """Full stagewise run: segment, extract all, search all, verify all, count."""
        diagnostics = diagnostics if diagnostics is not None else Diagnostics()
        sentences = segment_sentences(answer)
        if not sentences:
            return FactualityScore(response_id=response_id, supported=0, total=0, verdicts=())
        claims = await self.extract_claims_async(response_id, sentences, diagnostics)
        if not claims:
            return FactualityScore(response_id=response_id, supported=0, total=0, verdicts=())
        evidence = await self.search_evidence_async(claims, diagnostics)
        verdicts = await self.verify_claims_async(claims, evidence, diagnostics)
        return FactualityScore.from_verdicts(response_id, tuple(verdicts))

    def score_answer(self, response_id: str, answer: str) -> FactualityScore:
        return asyncio.run(self.score_answer_async(response_id, answer))

    def score_answer_with_diagnostics(self, response_id: str, answer: str) -> tuple[FactualityScore, Diagnostics]:
        diagnostics = Diagnostics()
        score = asyncio.run(self.score_answer_async(response_id, answer, diagnostics))
        return score, diagnostics
