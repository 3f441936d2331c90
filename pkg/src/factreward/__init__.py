"""Long-form factuality reward engine.

Library surface: claim verification pipeline, three-part reward, RL math
kernels, evaluation toolkit, plus an HTTP reward service and batch CLI.
"""

__version__ = "0.1.0"

from .types import (  # noqa: F401
    Claim,
    EvalReport,
    EvalRow,
    EvidenceBundle,
    EvidenceSnippet,
    FactualityScore,
    GroupMember,
    GroupRollout,
    ParsedResponse,
    PreferencePair,
    PromptRecord,
    ResponseRecord,
    RewardBreakdown,
    RewardConfig,
    REWARD_PRESETS,
    Split,
    Verdict,
    VerdictLabel,
    parse_response,
)
