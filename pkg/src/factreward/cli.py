"""Batch command-line entry points.

Subcommands: serve, score, eval, dpo-pairs, gen-prompts, sft-sample,
analyze-cot. Every stochastic subcommand takes --seed; all file-producing
subcommands are deterministic given identical inputs, seeds, and backends.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import random
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import evalkit
from .assets import load_prompt, render
from .backends import BackendError, ChatRequest
from .config import ConfigError, Stack, build_stack, load_config
from .pipeline import PipelineError
from .records import read_records, write_records
from .rlmath import DpoConfig, ScoredCandidate, build_preference_pairs
from .types import PromptRecord, ResponseRecord, Split, parse_response

logger = logging.getLogger(__name__)


class CliError(Exception):
    """Fatal CLI condition with a one-line diagnosis."""


def _load_stack(config_path: Optional[str]) -> Stack:
    if not config_path:
        raise CliError("--config is required for this subcommand")
    return build_stack(load_config(config_path))


def _parse_shard(text: str) -> tuple[int, int]:
    try:
        index_str, count_str = text.split("/", 1)
        index, count = int(index_str), int(count_str)
    except ValueError as exc:
        raise CliError(f"--shard must look like i/n, got {text!r}") from exc
    if count < 1 or not 0 <= index < count:
        raise CliError(f"--shard {text!r} out of range")
    return index, count


# ---------------------------------------------------------------------------
# subcommands


def cmd_serve(args: argparse.Namespace) -> int:
    from .server import run_server

    config = load_config(args.config)
    run_server(config)
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    stack = _load_stack(args.config)
    shard = _parse_shard(args.shard) if args.shard else (0, 1)
    responses = read_records(args.input, ResponseRecord)
    index, count = shard
    selected = [r for r in responses if evalkit.shard_of(r.prompt_id, count) == index]

    async def run() -> list:
        async def one(record: ResponseRecord):
            text = evalkit.answer_text(record.raw)
            return await stack.pipeline.score_answer_async(record.id, text)

        return list(await asyncio.gather(*[one(r) for r in selected]))

    scores = asyncio.run(run())
    write_records(args.output, scores)
    print(f"scored {len(scores)} responses -> {args.output}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    manifest = evalkit.DatasetManifest.load(args.manifest)
    if args.win_rate and manifest.baseline_responses_path is None:
        raise CliError("--win-rate requires baseline_responses_path in the manifest")
    stack = _load_stack(args.config)
    shard = evalkit.evaluate_factuality(manifest, stack.pipeline)
    rate = None
    if args.win_rate:
        logger.info("win-rate judging with seed %d", args.seed)
        rate = asyncio.run(
            evalkit.win_rate_details_async(manifest, stack.judge_pool, seed=args.seed)
        ).rate
    report = evalkit.report_from_rows(manifest.name, shard.rows, win_rate=rate)
    out_prefix = Path(args.output) if args.output else Path(args.manifest).with_suffix("")
    records_path = out_prefix.with_suffix(".report.jsonl")
    table_path = out_prefix.with_suffix(".table.txt")
    evalkit.write_report_files(report, records_path, table_path)
    print(f"evaluated {report.n_prompts} responses -> {records_path}, {table_path}")
    return 0


def cmd_dpo_pairs(args: argparse.Namespace) -> int:
    config = DpoConfig(beta=0.1, tau_margin=args.tau_m, tau_length=args.tau_l)
    by_prompt: dict[str, list[ScoredCandidate]] = {}
    order: list[str] = []
    with open(args.input, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                candidate = ScoredCandidate(
                    response_id=data["response_id"],
                    precision=float(data["precision"]),
                    answer_length=int(data["answer_length"]),
                )
                prompt_id = data["prompt_id"]
            except (ValueError, KeyError, TypeError) as exc:
                raise CliError(f"{args.input}:{lineno}: bad candidate record: {exc}") from exc
            if prompt_id not in by_prompt:
                order.append(prompt_id)
            by_prompt.setdefault(prompt_id, []).append(candidate)

    pairs = []
    dropped = 0
    for prompt_id in order:
        pair = build_preference_pairs(prompt_id, by_prompt[prompt_id], config)
        if pair is None:
            dropped += 1
        else:
            pairs.append(pair)
    write_records(args.output, pairs)
    print(f"kept {len(pairs)} pairs, dropped {dropped} prompts -> {args.output}")
    return 0


def cmd_gen_prompts(args: argparse.Namespace) -> int:
    factual = read_records(args.factual_seeds, PromptRecord)
    diverse = read_records(args.diverse_seeds, PromptRecord)
    if len(factual) < 2:
        raise CliError(f"factual seed pool needs >= 2 records, got {len(factual)}")
    if len(diverse) < 4:
        raise CliError(f"diverse seed pool needs >= 4 records, got {len(diverse)}")
    stack = _load_stack(args.config)
    template = load_prompt("prompt_generation")
    rng = random.Random(args.seed)

    def make_request() -> ChatRequest:
        fp1, fp2 = (p.text for p in rng.sample(factual, 2))
        p1, p2, p3, p4 = (p.text for p in rng.sample(diverse, 4))
        return ChatRequest.user(
            render(template, fp1=fp1, fp2=fp2, p1=p1, p2=p2, p3=p3, p4=p4),
            temperature=1.0,
            request_tag="prompt_generation",
        )

    def extract(reply: str) -> Optional[str]:
        match = re.search(r"<new_prompt>(.*?)</new_prompt>", reply, re.DOTALL)
        if match is None:
            return None
        text = match.group(1).strip()
        return text or None

    requests = [make_request() for _ in range(args.n)]
    replies = stack.chat_pool.chat_batch_sync(requests)
    retry_indices = [
        i for i, reply in enumerate(replies)
        if isinstance(reply, BackendError) or extract(reply) is None
    ]
    if retry_indices:
        retries = stack.chat_pool.chat_batch_sync([requests[i] for i in retry_indices])
        for i, reply in zip(retry_indices, retries):
            replies[i] = reply

    texts: list[str] = []
    seen: set[str] = set()
    skipped = 0
    for reply in replies:
        text = None if isinstance(reply, BackendError) else extract(reply)
        if text is None:
            skipped += 1
            continue
        if text in seen:
            continue
        seen.add(text)
        texts.append(text)

    n_sft = 0
    if args.split_ratio:
        try:
            sft_part, rl_part = (int(p) for p in args.split_ratio.split(":", 1))
        except ValueError as exc:
            raise CliError(f"--split-ratio must look like SFT:RL, got {args.split_ratio!r}") from exc
        if sft_part < 0 or rl_part < 0 or sft_part + rl_part == 0:
            raise CliError("--split-ratio parts must be nonnegative and not both zero")
        n_sft = round(len(texts) * sft_part / (sft_part + rl_part))

    records = [
        PromptRecord(
            id=f"gen-{i:06d}",
            text=text,
            split=Split.SFT if i < n_sft else Split.RL,
            source_tag="synthetic",
        )
        for i, text in enumerate(texts)
    ]
    write_records(args.output, records)
    print(f"generated {len(records)} prompts (skipped {skipped}, seed {args.seed}) -> {args.output}")
    return 0


def select_sft_target(scored, raw_precision: bool = False):
    """Pick the response id with the highest (smoothed) factual precision.

    ``scored`` holds (response_id, FactualityScore) tuples for one prompt.
    Ties break on more supported claims, then lexicographic response id.
    Returns None when the prompt has no scorable candidate.
    """
    best_key = None
    best_id = None
    for response_id, score in scored:
        if raw_precision:
            selection = -1.0 if score.precision is None else score.precision
        else:
            selection = score.smoothed_precision
        key = (-selection, -score.supported, response_id)
        if best_key is None or key < best_key:
            best_key = key
            best_id = response_id
    return best_id


def cmd_sft_sample(args: argparse.Namespace) -> int:
    if args.k < 1:
        raise CliError("--k must be >= 1")
    stack = _load_stack(args.config)
    prompts = read_records(args.prompts, PromptRecord)
    template = load_prompt("factual_cot_2shot")

    requests = []
    owners: list[tuple[str, str]] = []  # (prompt_id, response_id)
    for prompt in prompts:
        rendered = render(template, question=prompt.text)
        for j in range(args.k):
            requests.append(
                ChatRequest.user(rendered, temperature=args.temperature, request_tag="sft_generation")
            )
            owners.append((prompt.id, f"{prompt.id}#s{j}"))

    replies = stack.chat_pool.chat_batch_sync(requests)

    async def score_all(candidates: list[tuple[str, str, str]]) -> list:
        async def one(item: tuple[str, str, str]):
            _, response_id, answer = item
            return await stack.pipeline.score_answer_async(response_id, answer)

        return list(await asyncio.gather(*[one(c) for c in candidates]))

    candidates: list[tuple[str, str, str]] = []  # (prompt_id, response_id, answer)
    raw_by_response: dict[str, str] = {}
    for (prompt_id, response_id), reply in zip(owners, replies):
        if isinstance(reply, BackendError):
            continue
        parsed = parse_response(reply)
        if not parsed.well_formed:
            continue
        candidates.append((prompt_id, response_id, parsed.answer or ""))
        raw_by_response[response_id] = reply

    scores = asyncio.run(score_all(candidates))

    scored_by_prompt: dict[str, list] = {}
    for (prompt_id, response_id, _), score in zip(candidates, scores):
        scored_by_prompt.setdefault(prompt_id, []).append((response_id, score))

    chosen = []
    skipped = 0
    for prompt in prompts:
        target = select_sft_target(scored_by_prompt.get(prompt.id, []), args.raw_precision)
        if target is None:
            skipped += 1
        else:
            chosen.append(ResponseRecord(id=target, prompt_id=prompt.id, raw=raw_by_response[target]))
    write_records(args.output, chosen)
    print(f"selected {len(chosen)} targets (skipped {skipped} prompts, seed {args.seed}) -> {args.output}")
    return 0


def cmd_analyze_cot(args: argparse.Namespace) -> int:
    stack = _load_stack(args.config)
    rollouts = read_records(args.rollouts, ResponseRecord)
    prompt_texts = None
    if args.prompts:
        prompt_texts = {p.id: p.text for p in read_records(args.prompts, PromptRecord)}
    table = evalkit.cot_strategy_analysis(rollouts, stack.chat_pool, prompt_texts, top_k=args.top)
    histogram = evalkit.cot_length_histogram(rollouts, bin_width=args.bin_width)
    out = Path(args.output)
    hist_path = Path(args.hist_output) if args.hist_output else out.with_suffix(".lengths.csv")
    evalkit.write_strategy_csv(table, out)
    evalkit.write_histogram_csv(histogram, hist_path)
    print(
        f"analyzed {table.analyzed} rollouts (rejected {table.rejected}, "
        f"malformed {histogram.malformed}) -> {out}, {hist_path}"
    )
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="factreward", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the reward HTTP service")
    p.add_argument("--config", required=True, help="runtime config file (YAML or JSON)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("score", help="score a response file through the verification pipeline")
    p.add_argument("--input", required=True, help="response records (JSONL)")
    p.add_argument("--output", required=True, help="score records out (JSONL)")
    p.add_argument("--shard", default=None, help="i/n shard selector on prompt id")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--win-rate", action="store_true", dest="win_rate")
    p.add_argument("--output", default=None, help="output path prefix")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dpo-pairs", help="build preference pairs from scored candidates")
    p.add_argument("--input", required=True, help="candidate records: prompt_id,response_id,precision,answer_length")
    p.add_argument("--output", required=True)
    p.add_argument("--tau-m", type=float, default=0.1, dest="tau_m")
    p.add_argument("--tau-l", type=float, default=0.1, dest="tau_l")
    p.set_defaults(func=cmd_dpo_pairs)

    p = sub.add_parser("gen-prompts", help="generate synthetic fact-seeking prompts")
    p.add_argument("--factual-seeds", required=True, dest="factual_seeds")
    p.add_argument("--diverse-seeds", required=True, dest="diverse_seeds")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--split-ratio", default=None, dest="split_ratio", help="SFT:RL, e.g. 3:4")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_prompts)

    p = sub.add_parser("sft-sample", help="sample k responses per prompt and keep the most precise")
    p.add_argument("--prompts", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--output", required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--raw-precision", action="store_true", dest="raw_precision",
                   help="select by raw precision instead of smoothed")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sft_sample)

    p = sub.add_parser("analyze-cot", help="summarize reasoning strategies and CoT lengths")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--output", required=True, help="strategy frequency CSV")
    p.add_argument("--hist-output", default=None, dest="hist_output", help="length histogram CSV")
    p.add_argument("--prompts", default=None, help="prompt records to join question text from")
    p.add_argument("--bin-width", type=int, default=100, dest="bin_width")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_analyze_cot)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, evalkit.ManifestError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
