"""Shared immutable domain types for the factuality reward engine.

Everything in here is a plain frozen dataclass (structural equality, safe to
share across threads). Parsing a rollout into its reasoning/answer segments
lives here too, since every other module depends on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional


class Split(str, Enum):
    SFT = "sft"
    RL = "rl"
    EVAL = "eval"


class VerdictLabel(str, Enum):
    SUPPORTED = "supported"
    UNSUPPORTED = "unsupported"


@dataclass(frozen=True)
class PromptRecord:
    """One training or evaluation prompt."""

    id: str
    text: str
    split: Split = Split.RL
    source_tag: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("prompt id must be non-empty")
        if not self.text.strip():
            raise ValueError(f"prompt {self.id!r}: text is empty after trimming")
        if not isinstance(self.split, Split):
            object.__setattr__(self, "split", Split(self.split))


@dataclass(frozen=True)
class ResponseRecord:
    """One raw model response tied to the prompt it answers."""

    id: str
    prompt_id: str
    raw: str


# The four structural tags a rollout must contain, in order, exactly once each.
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"


@dataclass(frozen=True)
class ParsedResponse:
    """A rollout split into reasoning and answer segments.

    ``well_formed`` is true iff the raw text is exactly one think block
    followed by one answer block with nothing but whitespace before, between,
    or after (tags case-sensitive, no nesting). The surrounding whitespace is
    captured so ``reassemble()`` reproduces ``raw`` byte for byte.
    """

    raw: str
    cot: Optional[str] = None
    answer: Optional[str] = None
    well_formed: bool = False
    lead_ws: str = ""
    mid_ws: str = ""
    trail_ws: str = ""

    def __post_init__(self) -> None:
        if self.well_formed != (self.cot is not None and self.answer is not None):
            raise ValueError("well_formed must hold exactly when both segments are present")

    def reassemble(self) -> Optional[str]:
        """Rebuild the raw text from the parsed segments (None when malformed)."""
        if not self.well_formed:
            return None
        return (
            self.lead_ws
            + THINK_OPEN
            + (self.cot or "")
            + THINK_CLOSE
            + self.mid_ws
            + ANSWER_OPEN
            + (self.answer or "")
            + ANSWER_CLOSE
            + self.trail_ws
        )


def parse_response(raw: str) -> ParsedResponse:
    """Split a rollout into reasoning and answer segments.

    Total over arbitrary input: malformedness is reported as a value, never
    raised. The format is strict: each of the four tags must appear exactly
    once, in order, and only whitespace may surround the two blocks.
    """
    tags = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)
    if any(raw.count(tag) != 1 for tag in tags):
        return ParsedResponse(raw=raw)
    i1 = raw.index(THINK_OPEN)
    i2 = raw.index(THINK_CLOSE)
    i3 = raw.index(ANSWER_OPEN)
    i4 = raw.index(ANSWER_CLOSE)
    if not (i1 < i2 < i3 < i4):
        return ParsedResponse(raw=raw)
    lead = raw[:i1]
    mid = raw[i2 + len(THINK_CLOSE) : i3]
    trail = raw[i4 + len(ANSWER_CLOSE) :]
    if lead.strip() or mid.strip() or trail.strip():
        return ParsedResponse(raw=raw)
    return ParsedResponse(
        raw=raw,
        cot=raw[i1 + len(THINK_OPEN) : i2],
        answer=raw[i3 + len(ANSWER_OPEN) : i4],
        well_formed=True,
        lead_ws=lead,
        mid_ws=mid,
        trail_ws=trail,
    )


@dataclass(frozen=True)
class Claim:
    """A single verifiable factual statement extracted from a response sentence."""

    id: str
    response_id: str
    sentence_index: int
    text: str
    context_window: str = ""

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"claim {self.id!r}: text is empty")
        if self.sentence_index < 0:
            raise ValueError(f"claim {self.id!r}: negative sentence_index")


@dataclass(frozen=True)
class EvidenceSnippet:
    title: str
    url: str
    snippet: str


@dataclass(frozen=True)
class EvidenceBundle:
    """Web evidence snippets retrieved for one claim."""

    claim_id: str
    snippets: tuple[EvidenceSnippet, ...] = ()
    fetched_at: float = 0.0


@dataclass(frozen=True)
class Verdict:
    """Supported/unsupported label for one claim."""

    claim_id: str
    label: VerdictLabel
    rationale: Optional[str] = None

    def __post_init__(self) -> None:
        if not isinstance(self.label, VerdictLabel):
            object.__setattr__(self, "label", VerdictLabel(self.label))


@dataclass(frozen=True)
class FactualityScore:
    """Aggregate of claim verdicts for one response.

    ``precision`` is undefined (None) when no claims were extracted;
    ``smoothed_precision`` = supported / (total + 1) is always defined.
    """

    response_id: str
    supported: int
    total: int
    verdicts: tuple[Verdict, ...] = ()

    def __post_init__(self) -> None:
        if self.supported < 0 or self.total < 0:
            raise ValueError("claim counts must be nonnegative")
        if self.supported > self.total:
            raise ValueError(
                f"score for {self.response_id!r}: supported {self.supported} exceeds total {self.total}"
            )

    @property
    def precision(self) -> Optional[float]:
        if self.total == 0:
            return None
        return self.supported / self.total

    @property
    def smoothed_precision(self) -> float:
        return self.supported / (self.total + 1)

    @classmethod
    def from_verdicts(cls, response_id: str, verdicts: tuple[Verdict, ...]) -> "FactualityScore":
        supported = sum(1 for v in verdicts if v.label is VerdictLabel.SUPPORTED)
        return cls(response_id=response_id, supported=supported, total=len(verdicts), verdicts=tuple(verdicts))


@dataclass(frozen=True)
class RewardConfig:
    """Weights of the three reward terms plus the malformed-format penalty.

    The detail term uses the natural logarithm; the weights are therefore
    directly comparable across deployments.
    """

    lambda_: float = 0.0
    mu: float = 0.1
    malformed_penalty: float = -1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lambda_) and self.lambda_ >= 0):
            raise ValueError("lambda_ must be finite and nonnegative")
        if not (math.isfinite(self.mu) and self.mu >= 0):
            raise ValueError("mu must be finite and nonnegative")
        if not (math.isfinite(self.malformed_penalty) and self.malformed_penalty < 0):
            raise ValueError("malformed_penalty must be finite and negative")


# Weight presets: "main" is the default deployment; the others trade
# precision for detail.
REWARD_PRESETS: dict[str, RewardConfig] = {
    "main": RewardConfig(lambda_=0.0, mu=0.1),
    "detail": RewardConfig(lambda_=0.01, mu=0.1),
    "high-detail": RewardConfig(lambda_=0.1, mu=0.1),
}


@dataclass(frozen=True)
class RewardBreakdown:
    """The three reward terms and their weighted total for one response."""

    r_fact: float = 0.0
    r_dtl: float = 0.0
    r_rel: float = 0.0
    total: float = 0.0
    malformed: bool = False
    judge_unparseable: bool = False


@dataclass(frozen=True)
class GroupMember:
    """One rollout inside a group: its scalar reward and per-token log-probs."""

    response_id: str
    reward: float
    token_logprobs_new: tuple[float, ...] = ()
    token_logprobs_old: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if len(self.token_logprobs_new) != len(self.token_logprobs_old):
            raise ValueError(
                f"member {self.response_id!r}: new/old token log-prob lengths differ "
                f"({len(self.token_logprobs_new)} vs {len(self.token_logprobs_old)})"
            )
        if not math.isfinite(self.reward):
            raise ValueError(f"member {self.response_id!r}: reward is not finite")


@dataclass(frozen=True)
class GroupRollout:
    """A group of rollouts for one prompt with group-relative advantages."""

    prompt_id: str
    members: tuple[GroupMember, ...]
    advantages: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.advantages) != len(self.members):
            raise ValueError("advantages must align one-to-one with members")

    @classmethod
    def build(cls, prompt_id: str, members: tuple[GroupMember, ...]) -> "GroupRollout":
        """Construct with advantages computed by group mean-centering."""
        from .rlmath import group_advantages

        rewards = [m.reward for m in members]
        return cls(prompt_id=prompt_id, members=tuple(members), advantages=tuple(group_advantages(rewards)))


@dataclass(frozen=True)
class PreferencePair:
    """Chosen/rejected response pair selected for preference optimization."""

    prompt_id: str
    chosen_id: str
    rejected_id: str
    chosen_precision: float
    rejected_precision: float
    margin: float
    length_ratio_dev: float

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError("pair margin must be positive")
        if self.length_ratio_dev < 0:
            raise ValueError("length_ratio_dev must be nonnegative")


@dataclass(frozen=True)
class EvalRow:
    """Per-prompt evaluation outcome; counts are None when scoring failed."""

    prompt_id: str
    response_id: str
    supported: Optional[int] = None
    total: Optional[int] = None
    error: Optional[str] = None

    @property
    def precision(self) -> Optional[float]:
        if self.supported is None or self.total in (None, 0):
            return None
        return self.supported / self.total


@dataclass(frozen=True)
class EvalReport:
    """Dataset-level aggregation of per-prompt factuality rows."""

    dataset_name: str
    n_prompts: int
    mean_precision: Optional[float]
    mean_detail: Optional[float]
    micro_precision: Optional[float] = None
    win_rate: Optional[float] = None
    per_prompt_rows: tuple[EvalRow, ...] = field(default=())
