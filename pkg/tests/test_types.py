"""Core type invariants and the response format gate."""

import random

import pytest

from factreward.types import (
    FactualityScore,
    GroupMember,
    GroupRollout,
    PreferencePair,
    PromptRecord,
    RewardConfig,
    Split,
    parse_response,
)

WELL_FORMED_CASES = [
    "<think>abc</think> <answer>xyz</answer>",
    "<think>abc</think><answer>xyz</answer>",
    "  <think>abc</think>\n\n<answer>xyz</answer>\n",
    "<think></think><answer></answer>",
    "<think>multi\nline\ncot</think>\t<answer>multi\nline</answer>  ",
]

MALFORMED_CASES = [
    "",
    "plain text with no tags",
    "<think>abc</think> xyz",
    "<answer>xyz</answer>",
    "<think>abc</think>",
    "<answer>x</answer><think>y</think>",
    "<think>a<think>b</think></think><answer>c</answer>",
    "<think>a</think><answer>b<answer>c</answer></answer>",
    "pre <think>a</think><answer>b</answer>",
    "<think>a</think> mid <answer>b</answer>",
    "<think>a</think><answer>b</answer> post",
    "<THINK>a</THINK><answer>b</answer>",
    "<think>a</think><ANSWER>b</ANSWER>",
    "<think>a</think><answer>b</answer><answer>c</answer>",
    "<think>a</think><think>b</think><answer>c</answer>",
    "<think>a</answer><answer>b</think>",
]


def test_parse_minimal_well_formed():
    parsed = parse_response("<think>abc</think> <answer>xyz</answer>")
    assert parsed.well_formed
    assert parsed.cot == "abc"
    assert parsed.answer == "xyz"


@pytest.mark.parametrize("raw", WELL_FORMED_CASES)
def test_parse_well_formed_reassembles(raw):
    parsed = parse_response(raw)
    assert parsed.well_formed
    assert parsed.reassemble() == raw


@pytest.mark.parametrize("raw", MALFORMED_CASES)
def test_parse_malformed(raw):
    parsed = parse_response(raw)
    assert not parsed.well_formed
    assert parsed.cot is None and parsed.answer is None


def test_parse_is_total_and_reassembly_holds_under_fuzz():
    rng = random.Random(20240817)
    fragments = [
        "<think>", "</think>", "<answer>", "</answer>", " ", "\n", "\t",
        "text", "<", ">", "/", "think", "answer", "é中文", "\x00", '"', "<think>",
    ]
    for _ in range(3000):
        raw = "".join(rng.choice(fragments) for _ in range(rng.randint(0, 12)))
        parsed = parse_response(raw)  # must never raise
        if parsed.well_formed:
            assert parsed.reassemble() == raw


def test_parsed_response_equality_is_structural():
    a = parse_response("<think>a</think><answer>b</answer>")
    b = parse_response("<think>a</think><answer>b</answer>")
    assert a == b and a is not b


def test_prompt_record_validation():
    with pytest.raises(ValueError):
        PromptRecord(id="p", text="   ")
    with pytest.raises(ValueError):
        PromptRecord(id="", text="x")
    record = PromptRecord(id="p", text="x", split="sft")
    assert record.split is Split.SFT


def test_factuality_score_invariants():
    score = FactualityScore(response_id="r", supported=2, total=3)
    assert score.precision == 2 / 3
    assert score.smoothed_precision == 0.5
    empty = FactualityScore(response_id="r", supported=0, total=0)
    assert empty.precision is None
    assert empty.smoothed_precision == 0.0
    with pytest.raises(ValueError):
        FactualityScore(response_id="r", supported=4, total=3)


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(lambda_=-0.1)
    with pytest.raises(ValueError):
        RewardConfig(mu=float("inf"))
    with pytest.raises(ValueError):
        RewardConfig(malformed_penalty=0.5)


def test_group_rollout_validation():
    member = GroupMember(response_id="a", reward=1.0, token_logprobs_new=(0.0,), token_logprobs_old=(0.0,))
    with pytest.raises(ValueError):
        GroupRollout(prompt_id="p", members=(member,), advantages=())
    with pytest.raises(ValueError):
        GroupMember(response_id="a", reward=1.0, token_logprobs_new=(0.0, 0.0), token_logprobs_old=(0.0,))
    group = GroupRollout.build("p", (member, GroupMember(response_id="b", reward=0.0)))
    assert sum(group.advantages) == pytest.approx(0.0, abs=1e-12)


def test_preference_pair_validation():
    with pytest.raises(ValueError):
        PreferencePair(
            prompt_id="p", chosen_id="a", rejected_id="b",
            chosen_precision=0.5, rejected_precision=0.5, margin=0.0, length_ratio_dev=0.0,
        )
