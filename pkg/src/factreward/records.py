"""Line-delimited JSON record IO for every domain type.

One value per line, UTF-8, stable field names. ``from_record(kind, to_record(x)) == x``
for every valid value. Files are streaming-friendly so sharded runs can be
concatenated and merged without loading everything at once.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Optional, Type, TypeVar

from .types import (
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
    Split,
    Verdict,
    VerdictLabel,
    parse_response,
)

T = TypeVar("T")


class RecordError(ValueError):
    """A record failed to parse; carries the 1-based line number when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


def _require(data: dict, *fields: str) -> None:
    for name in fields:
        if name not in data:
            raise RecordError(f"missing field {name!r}")


def _prompt_to(value: PromptRecord) -> dict:
    return {"id": value.id, "text": value.text, "split": value.split.value, "source": value.source_tag}


def _prompt_from(data: dict) -> PromptRecord:
    _require(data, "id", "text")
    return PromptRecord(
        id=data["id"],
        text=data["text"],
        split=Split(data.get("split", "rl")),
        source_tag=data.get("source"),
    )


def _response_to(value: ResponseRecord) -> dict:
    return {"id": value.id, "prompt_id": value.prompt_id, "raw": value.raw}


def _response_from(data: dict) -> ResponseRecord:
    _require(data, "id", "prompt_id", "raw")
    return ResponseRecord(id=data["id"], prompt_id=data["prompt_id"], raw=data["raw"])


def _parsed_to(value: ParsedResponse) -> dict:
    return {"raw": value.raw}


def _parsed_from(data: dict) -> ParsedResponse:
    _require(data, "raw")
    return parse_response(data["raw"])


def _claim_to(value: Claim) -> dict:
    return {
        "id": value.id,
        "response_id": value.response_id,
        "sentence_index": value.sentence_index,
        "text": value.text,
        "context_window": value.context_window,
    }


def _claim_from(data: dict) -> Claim:
    _require(data, "id", "response_id", "sentence_index", "text")
    return Claim(
        id=data["id"],
        response_id=data["response_id"],
        sentence_index=int(data["sentence_index"]),
        text=data["text"],
        context_window=data.get("context_window", ""),
    )


def _snippet_to(value: EvidenceSnippet) -> dict:
    return {"title": value.title, "url": value.url, "snippet": value.snippet}


def _snippet_from(data: dict) -> EvidenceSnippet:
    _require(data, "title", "url", "snippet")
    return EvidenceSnippet(title=data["title"], url=data["url"], snippet=data["snippet"])


def _bundle_to(value: EvidenceBundle) -> dict:
    return {
        "claim_id": value.claim_id,
        "snippets": [_snippet_to(s) for s in value.snippets],
        "fetched_at": value.fetched_at,
    }


def _bundle_from(data: dict) -> EvidenceBundle:
    _require(data, "claim_id")
    return EvidenceBundle(
        claim_id=data["claim_id"],
        snippets=tuple(_snippet_from(s) for s in data.get("snippets", [])),
        fetched_at=float(data.get("fetched_at", 0.0)),
    )


def _verdict_to(value: Verdict) -> dict:
    return {"claim_id": value.claim_id, "label": value.label.value, "rationale": value.rationale}


def _verdict_from(data: dict) -> Verdict:
    _require(data, "claim_id", "label")
    return Verdict(claim_id=data["claim_id"], label=VerdictLabel(data["label"]), rationale=data.get("rationale"))


def _score_to(value: FactualityScore) -> dict:
    return {
        "response_id": value.response_id,
        "supported": value.supported,
        "total": value.total,
        "precision": value.precision,
        "smoothed_precision": value.smoothed_precision,
        "verdicts": [_verdict_to(v) for v in value.verdicts],
    }


def _score_from(data: dict) -> FactualityScore:
    _require(data, "response_id", "supported", "total")
    return FactualityScore(
        response_id=data["response_id"],
        supported=int(data["supported"]),
        total=int(data["total"]),
        verdicts=tuple(_verdict_from(v) for v in data.get("verdicts", [])),
    )


def _reward_config_to(value: RewardConfig) -> dict:
    return {"lambda": value.lambda_, "mu": value.mu, "malformed_penalty": value.malformed_penalty}


def _reward_config_from(data: dict) -> RewardConfig:
    _require(data, "lambda", "mu")
    return RewardConfig(
        lambda_=float(data["lambda"]),
        mu=float(data["mu"]),
        malformed_penalty=float(data.get("malformed_penalty", -1.0)),
    )


def _breakdown_to(value: RewardBreakdown) -> dict:
    return {
        "r_fact": value.r_fact,
        "r_dtl": value.r_dtl,
        "r_rel": value.r_rel,
        "total": value.total,
        "malformed": value.malformed,
        "judge_unparseable": value.judge_unparseable,
    }


def _breakdown_from(data: dict) -> RewardBreakdown:
    _require(data, "total", "malformed")
    return RewardBreakdown(
        r_fact=float(data.get("r_fact", 0.0)),
        r_dtl=float(data.get("r_dtl", 0.0)),
        r_rel=float(data.get("r_rel", 0.0)),
        total=float(data["total"]),
        malformed=bool(data["malformed"]),
        judge_unparseable=bool(data.get("judge_unparseable", False)),
    )


def _group_to(value: GroupRollout) -> dict:
    return {
        "prompt_id": value.prompt_id,
        "members": [
            {
                "response_id": m.response_id,
                "reward": m.reward,
                "token_logprobs_new": list(m.token_logprobs_new),
                "token_logprobs_old": list(m.token_logprobs_old),
            }
            for m in value.members
        ],
        "advantages": list(value.advantages),
    }


def _group_from(data: dict) -> GroupRollout:
    _require(data, "prompt_id", "members", "advantages")
    members = tuple(
        GroupMember(
            response_id=m["response_id"],
            reward=float(m["reward"]),
            token_logprobs_new=tuple(m.get("token_logprobs_new", [])),
            token_logprobs_old=tuple(m.get("token_logprobs_old", [])),
        )
        for m in data["members"]
    )
    return GroupRollout(prompt_id=data["prompt_id"], members=members, advantages=tuple(data["advantages"]))


def _pair_to(value: PreferencePair) -> dict:
    return {
        "prompt_id": value.prompt_id,
        "chosen_id": value.chosen_id,
        "rejected_id": value.rejected_id,
        "chosen_precision": value.chosen_precision,
        "rejected_precision": value.rejected_precision,
        "margin": value.margin,
        "length_ratio_dev": value.length_ratio_dev,
    }


def _pair_from(data: dict) -> PreferencePair:
    _require(data, "prompt_id", "chosen_id", "rejected_id", "margin", "length_ratio_dev")
    return PreferencePair(
        prompt_id=data["prompt_id"],
        chosen_id=data["chosen_id"],
        rejected_id=data["rejected_id"],
        chosen_precision=float(data.get("chosen_precision", 1.0)),
        rejected_precision=float(data.get("rejected_precision", 0.0)),
        margin=float(data["margin"]),
        length_ratio_dev=float(data["length_ratio_dev"]),
    )


def _eval_row_to(value: EvalRow) -> dict:
    return {
        "prompt_id": value.prompt_id,
        "response_id": value.response_id,
        "supported": value.supported,
        "total": value.total,
        "error": value.error,
    }


def _eval_row_from(data: dict) -> EvalRow:
    _require(data, "prompt_id", "response_id")
    supported = data.get("supported")
    total = data.get("total")
    return EvalRow(
        prompt_id=data["prompt_id"],
        response_id=data["response_id"],
        supported=None if supported is None else int(supported),
        total=None if total is None else int(total),
        error=data.get("error"),
    )


def _eval_report_to(value: EvalReport) -> dict:
    return {
        "dataset_name": value.dataset_name,
        "n_prompts": value.n_prompts,
        "mean_precision": value.mean_precision,
        "mean_detail": value.mean_detail,
        "micro_precision": value.micro_precision,
        "win_rate": value.win_rate,
        "per_prompt_rows": [_eval_row_to(r) for r in value.per_prompt_rows],
    }


def _eval_report_from(data: dict) -> EvalReport:
    _require(data, "dataset_name", "n_prompts")
    return EvalReport(
        dataset_name=data["dataset_name"],
        n_prompts=int(data["n_prompts"]),
        mean_precision=data.get("mean_precision"),
        mean_detail=data.get("mean_detail"),
        micro_precision=data.get("micro_precision"),
        win_rate=data.get("win_rate"),
        per_prompt_rows=tuple(_eval_row_from(r) for r in data.get("per_prompt_rows", [])),
    )


_CODECS: dict[type, tuple[Callable[[Any], dict], Callable[[dict], Any]]] = {
    PromptRecord: (_prompt_to, _prompt_from),
    ResponseRecord: (_response_to, _response_from),
    ParsedResponse: (_parsed_to, _parsed_from),
    Claim: (_claim_to, _claim_from),
    EvidenceSnippet: (_snippet_to, _snippet_from),
    EvidenceBundle: (_bundle_to, _bundle_from),
    Verdict: (_verdict_to, _verdict_from),
    FactualityScore: (_score_to, _score_from),
    RewardConfig: (_reward_config_to, _reward_config_from),
    RewardBreakdown: (_breakdown_to, _breakdown_from),
    GroupRollout: (_group_to, _group_from),
    PreferencePair: (_pair_to, _pair_from),
    EvalRow: (_eval_row_to, _eval_row_from),
    EvalReport: (_eval_report_to, _eval_report_from),
}


def to_record(value: Any) -> dict:
    """Convert a domain value to its plain-dict wire form."""
    codec = _CODECS.get(type(value))
    if codec is None:
        raise TypeError(f"no record codec for {type(value).__name__}")
    return codec[0](value)


def from_record(kind: Type[T], data: dict, line: Optional[int] = None) -> T:
    """Decode a wire dict back into a domain value of the given kind."""
    codec = _CODECS.get(kind)
    if codec is None:
        raise TypeError(f"no record codec for {kind.__name__}")
    try:
        return codec[1](data)
    except RecordError as exc:
        if line is not None and exc.line is None:
            raise RecordError(str(exc), line=line) from None
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordError(f"bad {kind.__name__} record: {exc}", line=line) from exc


def dumps_record(value: Any) -> str:
    return json.dumps(to_record(value), ensure_ascii=False, sort_keys=True)


def write_records(path: str | Path, values: Iterable[Any]) -> int:
    """Write values one JSON record per line; returns the record count."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for value in values:
            fh.write(dumps_record(value))
            fh.write("\n")
            count += 1
    return count


def iter_records(path: str | Path, kind: Type[T]) -> Iterator[T]:
    """Stream records of one kind from a file, raising RecordError with line numbers."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw_line in enumerate(fh, start=1):
            stripped = raw_line.strip()
            if not stripped:
                continue
            try:
                data = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise RecordError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            if not isinstance(data, dict):
                raise RecordError("record is not an object", line=lineno)
            yield from_record(kind, data, line=lineno)


def read_records(path: str | Path, kind: Type[T]) -> list[T]:
    return list(iter_records(path, kind))
