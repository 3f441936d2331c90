"""Dataset-level evaluation: factual precision/detail aggregation, pairwise
win-rate judging, shardable scoring with mergeable partial reports, and CoT
trace analysis."""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import math
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .assets import load_prompt, render
from .backends import BackendError, ChatPool, ChatRequest
from .pipeline import PipelineError, VerificationPipeline
from .records import read_records
from .types import EvalReport, EvalRow, PromptRecord, ResponseRecord, parse_response

logger = logging.getLogger(__name__)


class ManifestError(ValueError):
    """The dataset manifest or one of its referenced files is unusable."""


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    prompts_path: Path
    responses_path: Path
    baseline_responses_path: Optional[Path] = None

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ManifestError(f"manifest {path} is not a mapping")
        for required in ("name", "prompts_path", "responses_path"):
            if required not in data:
                raise ManifestError(f"manifest {path}: missing field {required!r}")
        base = path.parent
        baseline = data.get("baseline_responses_path")
        return cls(
            name=str(data["name"]),
            prompts_path=base / data["prompts_path"],
            responses_path=base / data["responses_path"],
            baseline_responses_path=(base / baseline) if baseline else None,
        )

    def load_data(self) -> tuple[list[PromptRecord], list[ResponseRecord]]:
        try:
            prompts = read_records(self.prompts_path, PromptRecord)
            responses = read_records(self.responses_path, ResponseRecord)
        except (OSError, ValueError) as exc:
            raise ManifestError(f"dataset {self.name!r}: {exc}") from exc
        prompt_ids = {p.id for p in prompts}
        if len(prompt_ids) != len(prompts):
            raise ManifestError(f"dataset {self.name!r}: duplicate prompt ids")
        orphans = sorted({r.prompt_id for r in responses} - prompt_ids)
        if orphans:
            raise ManifestError(
                f"dataset {self.name!r}: responses reference unknown prompts {orphans[:5]}"
            )
        return prompts, responses


def shard_of(prompt_id: str, shard_count: int) -> int:
    """Stable shard assignment from a hash of the prompt id (file order irrelevant)."""
    digest = hashlib.sha256(prompt_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % shard_count


@dataclass(frozen=True)
class EvalShard:
    """Rows produced by one shard of a dataset run."""

    dataset_name: str
    shard_index: int
    shard_count: int
    rows: tuple[EvalRow, ...]


def answer_text(raw: str) -> str:
    # Score the answer segment when the response follows the think/answer
    # format; plain responses (e.g. non-reasoning baselines) score whole.
    parsed = parse_response(raw)
    if parsed.well_formed:
        return parsed.answer or ""
    return raw


async def evaluate_factuality_async(
    manifest: DatasetManifest,
    pipeline: VerificationPipeline,
    shard: tuple[int, int] = (0, 1),
) -> EvalShard:
    """Score every response in this shard; failures become null rows, not aborts."""
    index, count = shard
    if not (0 <= index < count):
        raise ValueError(f"shard index {index} out of range for count {count}")
    _, responses = manifest.load_data()
    selected = [r for r in responses if shard_of(r.prompt_id, count) == index]

    async def score_one(record: ResponseRecord) -> EvalRow:
        try:
            score = await pipeline.score_answer_async(record.id, answer_text(record.raw))
        except PipelineError as exc:
            logger.warning("scoring failed for response %s: %s", record.id, exc)
            return EvalRow(prompt_id=record.prompt_id, response_id=record.id, error=str(exc))
        return EvalRow(
            prompt_id=record.prompt_id,
            response_id=record.id,
            supported=score.supported,
            total=score.total,
        )

    rows = list(await asyncio.gather(*[score_one(r) for r in selected]))
    rows.sort(key=lambda row: (row.prompt_id, row.response_id))
    return EvalShard(dataset_name=manifest.name, shard_index=index, shard_count=count, rows=tuple(rows))


def evaluate_factuality(
    manifest: DatasetManifest,
    pipeline: VerificationPipeline,
    shard: tuple[int, int] = (0, 1),
) -> EvalShard:
    return asyncio.run(evaluate_factuality_async(manifest, pipeline, shard))


def report_from_rows(
    dataset_name: str,
    rows: Sequence[EvalRow],
    win_rate: Optional[float] = None,
) -> EvalReport:
    """Aggregate rows into a report; means always recomputed from rows."""
    ordered = tuple(sorted(rows, key=lambda row: (row.prompt_id, row.response_id)))
    scored = [r for r in ordered if r.supported is not None and r.total is not None]
    with_claims = [r for r in scored if r.total]
    mean_precision = (
        math.fsum(r.supported / r.total for r in with_claims) / len(with_claims) if with_claims else None
    )
    mean_detail = math.fsum(r.supported for r in scored) / len(scored) if scored else None
    total_claims = sum(r.total for r in scored)
    micro_precision = (sum(r.supported for r in scored) / total_claims) if total_claims else None
    return EvalReport(
        dataset_name=dataset_name,
        n_prompts=len(ordered),
        mean_precision=mean_precision,
        mean_detail=mean_detail,
        micro_precision=micro_precision,
        win_rate=win_rate,
        per_prompt_rows=ordered,
    )


def merge_reports(partials: Sequence[EvalShard]) -> EvalReport:
    """Combine shard outputs into one report, validating complete disjoint coverage."""
    if not partials:
        raise ValueError("no shards to merge")
    names = {p.dataset_name for p in partials}
    if len(names) != 1:
        raise ValueError(f"shards come from different datasets: {sorted(names)}")
    counts = {p.shard_count for p in partials}
    if len(counts) != 1:
        raise ValueError(f"shards disagree on shard count: {sorted(counts)}")
    count = counts.pop()
    seen: set[int] = set()
    for partial in partials:
        if partial.shard_index in seen:
            raise ValueError(f"duplicate shard index {partial.shard_index}")
        seen.add(partial.shard_index)
    missing = sorted(set(range(count)) - seen)
    if missing:
        raise ValueError(f"missing shard index {missing[0]} of {count}")
    rows = [row for partial in partials for row in partial.rows]
    return report_from_rows(partials[0].dataset_name, rows)


# ---------------------------------------------------------------------------
# pairwise win rate


@dataclass(frozen=True)
class WinRateResult:
    rate: float
    judged: int
    wins: float
    excluded: int


async def win_rate_details_async(
    manifest: DatasetManifest,
    judge_pool: ChatPool,
    seed: int = 0,
) -> WinRateResult:
    """Pairwise target-vs-baseline judging with seeded position randomization.

    Unparseable verdicts (after one retry) exclude the prompt from the
    denominator. Presentation order is randomized per prompt so a
    position-biased judge cannot skew a symmetric comparison.
    """
    if manifest.baseline_responses_path is None:
        raise ManifestError(f"dataset {manifest.name!r}: baseline_responses_path required for win rate")
    prompts, responses = manifest.load_data()
    try:
        baseline = read_records(manifest.baseline_responses_path, ResponseRecord)
    except (OSError, ValueError) as exc:
        raise ManifestError(f"dataset {manifest.name!r}: {exc}") from exc

    prompt_text = {p.id: p.text for p in prompts}
    target_by_prompt = {r.prompt_id: r for r in responses}
    baseline_by_prompt = {r.prompt_id: r for r in baseline}
    shared = sorted(set(target_by_prompt) & set(baseline_by_prompt))

    template = load_prompt("pairwise_compare")
    rng = random.Random(seed)
    flips = {pid: rng.random() < 0.5 for pid in shared}

    def request_for(pid: str) -> ChatRequest:
        target_text = answer_text(target_by_prompt[pid].raw)
        baseline_text = answer_text(baseline_by_prompt[pid].raw)
        a, b = (baseline_text, target_text) if flips[pid] else (target_text, baseline_text)
        return ChatRequest.user(
            render(template, instruction=prompt_text[pid], output_a=a, output_b=b),
            max_tokens=1024,
            request_tag="pairwise_judge",
        )

    async def judge_one(pid: str) -> Optional[float]:
        request = request_for(pid)
        for _ in range(2):
            (reply,) = await judge_pool.chat_batch([request])
            if isinstance(reply, BackendError):
                continue
            tag = re.findall(r"<answer>(.*?)</answer>", reply, re.DOTALL)
            if not tag:
                continue
            content = tag[-1]
            has_a = "[[A]]" in content
            has_b = "[[B]]" in content
            has_tie = "[[C]]" in content
            if has_tie and not (has_a or has_b):
                return 0.5
            if has_a == has_b:
                continue
            target_is_a = not flips[pid]
            return 1.0 if has_a == target_is_a else 0.0
        return None

    outcomes = await asyncio.gather(*[judge_one(pid) for pid in shared])
    judged = [o for o in outcomes if o is not None]
    excluded = len(outcomes) - len(judged)
    wins = math.fsum(judged)
    rate = wins / len(judged) if judged else 0.0
    return WinRateResult(rate=rate, judged=len(judged), wins=wins, excluded=excluded)


def win_rate(manifest: DatasetManifest, judge_pool: ChatPool, seed: int = 0) -> float:
    return asyncio.run(win_rate_details_async(manifest, judge_pool, seed)).rate


# ---------------------------------------------------------------------------
# CoT trace analysis


@dataclass(frozen=True)
class CotLengthHistogram:
    bin_width: int
    bin_edges: tuple[int, ...]  # len(counts) + 1 edges; empty when no data
    counts: tuple[int, ...]
    well_formed: int
    malformed: int


def cot_length_histogram(rollouts: Sequence[ResponseRecord], bin_width: int = 100) -> CotLengthHistogram:
    """Bin CoT character lengths of well-formed rollouts; malformed counted apart."""
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    lengths = []
    malformed = 0
    for record in rollouts:
        parsed = parse_response(record.raw)
        if parsed.well_formed:
            lengths.append(len(parsed.cot or ""))
        else:
            malformed += 1
    if not lengths:
        return CotLengthHistogram(bin_width, (), (), 0, malformed)
    lo = (min(lengths) // bin_width) * bin_width
    hi = (max(lengths) // bin_width + 1) * bin_width
    edges = list(range(lo, hi + 1, bin_width))
    counts = [0] * (len(edges) - 1)
    for length in lengths:
        counts[(length - lo) // bin_width] += 1
    return CotLengthHistogram(bin_width, tuple(edges), tuple(counts), len(lengths), malformed)


@dataclass(frozen=True)
class StrategyTable:
    frequencies: tuple[tuple[str, int], ...]  # (strategy, count), most frequent first
    analyzed: int
    rejected: int


def _extract_json_object(reply: str) -> Optional[dict]:
    candidates = [reply]
    fenced = re.findall(r"```(?:json)?\s*(.*?)```", reply, re.DOTALL)
    candidates.extend(fenced)
    brace = reply.find("{")
    if brace != -1:
        candidates.append(reply[brace : reply.rfind("}") + 1])
    for candidate in candidates:
        try:
            data = json.loads(candidate.strip())
        except (ValueError, TypeError):
            continue
        if isinstance(data, dict):
            return data
    return None


async def cot_strategy_analysis_async(
    rollouts: Sequence[ResponseRecord],
    analysis_pool: ChatPool,
    prompt_texts: Optional[dict[str, str]] = None,
    top_k: int = 20,
) -> StrategyTable:
    """Ask an LLM to name the meta-reasoning strategies in each rollout and tally them.

    Replies must decode to a JSON object with a ``reasoning_strategies`` list
    and an integer ``helpfulness_score`` in [0, 10]; anything else rejects the
    rollout (tallied, not fatal).
    """
    template = load_prompt("cot_analysis")
    prompt_texts = prompt_texts or {}
    usable = [r for r in rollouts if parse_response(r.raw).well_formed]
    if not usable:
        return StrategyTable(frequencies=(), analyzed=0, rejected=0)
    requests = [
        ChatRequest.user(
            render(template, question=prompt_texts.get(r.prompt_id, ""), response=r.raw),
            max_tokens=2048,
            request_tag="cot_analysis",
        )
        for r in usable
    ]
    replies = await analysis_pool.chat_batch(requests)

    counts: dict[str, int] = {}
    analyzed = 0
    rejected = 0
    for reply in replies:
        if isinstance(reply, BackendError):
            rejected += 1
            continue
        data = _extract_json_object(reply)
        if data is None:
            rejected += 1
            continue
        strategies = data.get("reasoning_strategies")
        score = data.get("helpfulness_score")
        if not isinstance(strategies, list) or not all(isinstance(s, str) for s in strategies):
            rejected += 1
            continue
        if not isinstance(score, int) or isinstance(score, bool) or not 0 <= score <= 10:
            rejected += 1
            continue
        analyzed += 1
        for strategy in strategies:
            name = strategy.strip().casefold()
            if name:
                counts[name] = counts.get(name, 0) + 1

    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    return StrategyTable(frequencies=tuple(ranked), analyzed=analyzed, rejected=rejected)


def cot_strategy_analysis(
    rollouts: Sequence[ResponseRecord],
    analysis_pool: ChatPool,
    prompt_texts: Optional[dict[str, str]] = None,
    top_k: int = 20,
) -> StrategyTable:
    return asyncio.run(cot_strategy_analysis_async(rollouts, analysis_pool, prompt_texts, top_k))


# ---------------------------------------------------------------------------
# report emission


def format_report_table(report: EvalReport) -> str:
    """Fixed-width table with precision/detail/win-rate columns (percent, mean F, percent)."""

    def pct(value: Optional[float]) -> str:
        return f"{100 * value:.1f}" if value is not None else "-"

    def num(value: Optional[float]) -> str:
        return f"{value:.2f}" if value is not None else "-"

    header = f"{'dataset':<20} {'n':>6} {'Pre.':>8} {'Dtl.':>8} {'WR':>8}"
    line = (
        f"{report.dataset_name:<20} {report.n_prompts:>6} "
        f"{pct(report.mean_precision):>8} {num(report.mean_detail):>8} {pct(report.win_rate):>8}"
    )
    return header + "\n" + line + "\n"


def write_report_files(report: EvalReport, records_path: str | Path, table_path: str | Path) -> None:
    from .records import to_record

    with open(records_path, "w", encoding="utf-8") as fh:
        summary = to_record(report)
        rows = summary.pop("per_prompt_rows")
        fh.write(json.dumps({"record": "summary", **summary}, sort_keys=True, ensure_ascii=False) + "\n")
        for row in rows:
            fh.write(json.dumps({"record": "row", **row}, sort_keys=True, ensure_ascii=False) + "\n")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(format_report_table(report))


def write_histogram_csv(histogram: CotLengthHistogram, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_start,bin_end,count\n")
        for i, count in enumerate(histogram.counts):
            fh.write(f"{histogram.bin_edges[i]},{histogram.bin_edges[i + 1]},{count}\n")


def write_strategy_csv(table: StrategyTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("strategy,count\n")
        for strategy, count in table.frequencies:
            escaped = '"' + strategy.replace('"', '""') + '"' if "," in strategy or '"' in strategy else strategy
            fh.write(f"{escaped},{count}\n")
