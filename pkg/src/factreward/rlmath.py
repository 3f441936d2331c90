"""Pure numeric kernels for policy optimization.

Group-relative advantages and the clipped surrogate loss value (token sums
unnormalized by length, no std scaling), the preference-pair logistic loss
value, and the maximum-margin preference-pair builder. Values only; gradients
are the caller's business.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

from .types import GroupRollout, PreferencePair


@dataclass(frozen=True)
class GrpoConfig:
    clip_epsilon: float = 0.2
    kl_coefficient: float = 0.0

    def __post_init__(self) -> None:
        if not (0 < self.clip_epsilon < 1):
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.kl_coefficient < 0:
            raise ValueError("kl_coefficient must be >= 0")


@dataclass(frozen=True)
class DpoConfig:
    beta: float
    tau_margin: float = 0.1
    tau_length: float = 0.1

    def __post_init__(self) -> None:
        for name in ("beta", "tau_margin", "tau_length"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and positive")


def group_advantages(rewards: Sequence[float]) -> list[float]:
    """Mean-center a group's rewards: out[i] = rewards[i] - mean(rewards).

    The mean is taken in exact rational arithmetic, so the result is
    independent of summation order and exactly invariant under adding a
    representable constant to every reward. No std or length normalization.
    """
    n = len(rewards)
    if n < 2:
        raise ValueError(f"need at least 2 rewards for a group, got {n}")
    for r in rewards:
        if not math.isfinite(r):
            raise ValueError("rewards must all be finite")
    mean = sum((Fraction(r) for r in rewards), Fraction(0)) / n
    return [float(Fraction(r) - mean) for r in rewards]


def grpo_surrogate_loss(group: GroupRollout, config: Optional[GrpoConfig] = None) -> float:
    """Clipped surrogate loss value over one group, from new/old token log-probs.

    loss = -sum_i sum_t min(r_it * A_i, clip(r_it, 1-eps, 1+eps) * A_i) with
    r_it = exp(lp_new - lp_old). The optional KL term adds
    kl_coefficient * sum_it (lp_old - lp_new), the plain log-ratio estimate
    against the old policy.
    """
    cfg = config or GrpoConfig()
    if not group.members:
        raise ValueError("group has no members")
    if len(group.advantages) != len(group.members):
        raise ValueError("advantages not populated for every member")
    eps = cfg.clip_epsilon
    terms: list[float] = []
    kl_terms: list[float] = []
    for member, advantage in zip(group.members, group.advantages):
        if len(member.token_logprobs_new) != len(member.token_logprobs_old):
            raise ValueError(f"member {member.response_id!r}: token log-prob arrays misaligned")
        for lp_new, lp_old in zip(member.token_logprobs_new, member.token_logprobs_old):
            ratio = math.exp(lp_new - lp_old)
            clipped = min(max(ratio, 1 - eps), 1 + eps)
            terms.append(min(ratio * advantage, clipped * advantage))
            if cfg.kl_coefficient > 0:
                kl_terms.append(lp_old - lp_new)
    loss = -math.fsum(terms)
    if cfg.kl_coefficient > 0:
        loss += cfg.kl_coefficient * math.fsum(kl_terms)
    return loss


def _softplus(x: float) -> float:
    # log(1 + e^x) without overflow for large |x|.
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def dpo_loss(
    logp_c_policy: float,
    logp_c_ref: float,
    logp_r_policy: float,
    logp_r_ref: float,
    config: DpoConfig,
) -> float:
    """-ln sigma(beta * (chosen log-ratio - rejected log-ratio)), stable softplus form."""
    for value in (logp_c_policy, logp_c_ref, logp_r_policy, logp_r_ref):
        if not math.isfinite(value):
            raise ValueError("log-probabilities must be finite")
    margin = config.beta * ((logp_c_policy - logp_c_ref) - (logp_r_policy - logp_r_ref))
    return _softplus(-margin)


@dataclass(frozen=True)
class ScoredCandidate:
    """A scored response competing for a preference pair slot.

    ``answer_length`` counts unicode characters of the answer segment, so the
    length gate stays tokenizer-independent.
    """

    response_id: str
    precision: float
    answer_length: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.precision <= 1.0):
            raise ValueError(f"candidate {self.response_id!r}: precision outside [0, 1]")
        if self.answer_length < 0:
            raise ValueError(f"candidate {self.response_id!r}: negative answer_length")


def length_ratio_dev(chosen_length: int, rejected_length: int) -> float:
    """|1 - l_c / l_r|; two empty answers count as equal length."""
    if rejected_length == 0:
        return 0.0 if chosen_length == 0 else math.inf
    return abs(1.0 - chosen_length / rejected_length)


def build_preference_pairs(
    prompt_id: str,
    candidates: Sequence[ScoredCandidate],
    config: Optional[DpoConfig] = None,
) -> Optional[PreferencePair]:
    """Pick the maximum-margin (chosen, rejected) pair for one prompt.

    Over all ordered pairs with chosen precision above rejected precision,
    keep those whose margin exceeds tau_margin and whose length-ratio
    deviation is within tau_length; return the pair with maximum margin.
    Ties break on higher chosen precision, then lower length deviation, then
    lexicographic (chosen_id, rejected_id). None when nothing qualifies, in
    which case the prompt should be dropped from the training set.
    """
    cfg = config or DpoConfig(beta=0.1)
    if not candidates:
        raise ValueError(f"prompt {prompt_id!r}: empty candidate list")

    best: Optional[tuple] = None
    best_pair: Optional[PreferencePair] = None
    for chosen in candidates:
        for rejected in candidates:
            if chosen.response_id == rejected.response_id:
                continue
            margin = chosen.precision - rejected.precision
            if margin <= cfg.tau_margin:
                continue
            dev = length_ratio_dev(chosen.answer_length, rejected.answer_length)
            if dev > cfg.tau_length:
                continue
            # Sort key: larger margin, then larger chosen precision, then
            # smaller deviation, then smaller id pair.
            key = (-margin, -chosen.precision, dev, chosen.response_id, rejected.response_id)
            if best is None or key < best:
                best = key
                best_pair = PreferencePair(
                    prompt_id=prompt_id,
                    chosen_id=chosen.response_id,
                    rejected_id=rejected.response_id,
                    chosen_precision=chosen.precision,
                    rejected_precision=rejected.precision,
                    margin=margin,
                    length_ratio_dev=dev,
                )
    return best_pair


__all__ = [
    "GrpoConfig",
    "DpoConfig",
    "ScoredCandidate",
    "group_advantages",
    "grpo_surrogate_loss",
    "dpo_loss",
    "length_ratio_dev",
    "build_preference_pairs",
]
