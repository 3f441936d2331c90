"""Versioned prompt-template assets shipped with the package."""

from __future__ import annotations

from importlib import resources

PROMPT_NAMES = (
    "claim_extraction",
    "claim_verification",
    "relevance_judge",
    "pairwise_compare",
    "prompt_generation",
    "factual_cot_2shot",
    "cot_analysis",
)


def load_prompt(name: str) -> str:
    """Read a prompt template by name (without the .txt suffix)."""
    if name not in PROMPT_NAMES:
        raise KeyError(f"unknown prompt asset {name!r}; available: {', '.join(PROMPT_NAMES)}")
    return resources.files("factreward").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


def render(template: str, **fields: str) -> str:
    """Fill a template's {named} placeholders."""
    return template.format(**fields)
