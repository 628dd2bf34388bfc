"""Command-line entry point: episodes, NIAH grids, data forging and stats.

Exit codes: 0 success, 2 usage, 3 dependency failure, 4 episode aborted or replay mismatch.
"""

import argparse
import asyncio
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import SecretStr, ValidationError

from . import __version__
from .errors import GraderUnavailable, PlanError, StateAgentError, TransportError
from .models.bench import BenchGrid, NiahInstance, parse_lengths
from .models.context import TokenCounter
from .models.manifest import RunManifest
from .models.policy import NoteRule, OraclePlan, RemoteEndpoint, SamplingParams
from .models.settings import RunSettings
from .models.tools import DeleteMode, ToolSet
from .models.training import ProcessRules
from .models.trajectory import EpisodeConfig, EpisodeStatus, ScanMode
from .prompts import load_prompt
from .services.corpus_index import IndexCache
from .services.engine import replay_trajectory, run_episodes
from .services.forge import build_rl_batch, forge_dataset, funnel_table
from .services.grading import LLMJudgeGrader, TwoLayerGrader
from .services.niah import (
    accuracy_table,
    generate_grid,
    load_instances,
    niah_plan,
    position_table,
    run_grid,
    write_instances,
)
from .services.oracle import OraclePolicy, TruncationPolicy
from .services.policy import Policy
from .services.remote import ChatCompletionsClient, RemotePolicy
from .services.stats import tool_usage_stats
from .utils.exporters import GridExporter, SampleExporter, TableExporter, TableFormat, TrajectoryStore
from .utils.validators import InputValidator

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DEPENDENCY = 3
EXIT_ABORTED = 4

POLICIES = ("oracle", "truncation", "remote")


class UsageError(Exception):
    pass


# settings -> runtime objects

def episode_config(settings: RunSettings) -> EpisodeConfig:
    if settings.no_search:
        tool_set = ToolSet.without_search(settings.delete_mode)
    else:
        tool_set = ToolSet(deletion_mode=settings.delete_mode)
    return EpisodeConfig(
        token_budget=settings.token_budget,
        rounds_budget=settings.rounds_budget,
        max_rounds=settings.max_rounds,
        tool_set=tool_set,
        system_prompt=load_prompt(settings.prompt),
        counter=TokenCounter(scheme=settings.counter),
        default_chunk_size=settings.chunk_size,
        search_top_k=settings.search_top_k,
        snippet_tokens=settings.snippet_tokens,
        record_snapshots=settings.record_snapshots,
    )


def remote_endpoint(settings: RunSettings) -> RemoteEndpoint:
    if not settings.endpoint or not settings.model:
        raise UsageError("the remote policy needs --endpoint and --model")
    if not InputValidator.validate_endpoint_url(settings.endpoint):
        raise UsageError(f"invalid endpoint URL: {settings.endpoint}")
    return RemoteEndpoint(
        base_url=settings.endpoint,
        model_name=settings.model,
        auth_token=SecretStr(os.environ.get(settings.api_key_env, "")),
        sampling=SamplingParams(
            temperature=settings.temperature,
            top_p=settings.top_p,
            top_k=settings.top_k,
            max_tokens=settings.max_tokens,
            extra=settings.extra_params,
        ),
        timeout=settings.timeout,
        max_concurrency=settings.max_concurrency,
    )


def parse_note_rules(values: Sequence[str]) -> List[NoteRule]:
    rules = []
    for value in values:
        key, sep, pattern = value.partition("=")
        if not sep or not key:
            raise UsageError(f"--note-rule expects KEY=REGEX, got {value!r}")
        rules.append(NoteRule(key=key, pattern=pattern))
    return rules


def parse_caps(text: Optional[str]) -> Dict[str, float]:
    caps: Dict[str, float] = {}
    if not text:
        return caps
    for item in text.split(","):
        action, sep, share = item.partition("=")
        if not sep:
            raise UsageError(f"--caps expects ACTION=SHARE pairs, got {item!r}")
        caps[action.strip()] = float(share)
    problems = InputValidator.validate_caps(caps)
    if problems:
        raise UsageError("; ".join(problems))
    return caps


def load_plan(args: argparse.Namespace, chunk_size: int) -> OraclePlan:
    if args.plan:
        return OraclePlan.model_validate_json(InputValidator.read_text_file(args.plan))
    return OraclePlan(
        strategy=ScanMode(args.strategy),
        target_keys=args.target_key or [],
        note_schedule=parse_note_rules(args.note_rule or []),
        chunk_size=chunk_size,
    )


def settings_from(args: argparse.Namespace) -> RunSettings:
    overrides = {
        "token_budget": args.token_budget,
        "rounds_budget": args.rounds_budget,
        "max_rounds": args.max_rounds,
        "no_search": True if args.no_search else None,
        "delete_mode": args.delete_mode,
        "prompt": args.prompt,
        "counter": args.counter,
        "chunk_size": args.chunk_size,
        "endpoint": args.endpoint,
        "model": args.model,
        "api_key_env": args.api_key_env,
        "temperature": args.temperature,
        "jobs": args.jobs,
        "seed": args.seed,
        "index_cache_dir": args.index_cache_dir,
    }
    return RunSettings.resolve(args.config, overrides)


def write_manifest(command: str, argv: Sequence[str], out: Path, settings: Optional[RunSettings],
                   inputs: Dict[str, Path], outputs: List[Path], seeds: Optional[Dict[str, int]] = None) -> None:
    RunManifest(
        command=command,
        argv=list(argv),
        config=settings.model_dump(mode="json") if settings else {},
        seeds=seeds or ({"seed": settings.seed} if settings else {}),
        input_hashes={name: InputValidator.file_sha256(path) for name, path in inputs.items()},
        output_paths=[str(path) for path in outputs],
    ).write(out)


# commands

def cmd_run(args: argparse.Namespace, argv: Sequence[str]) -> int:
    settings = settings_from(args)
    corpus = InputValidator.read_text_file(args.corpus)
    query = InputValidator.read_text_file(args.query_file).strip() if args.query_file else args.query
    if not query:
        raise UsageError("a query is required (--query or --query-file)")
    config = episode_config(settings)
    cache = IndexCache(settings.index_cache_dir)

    factory: Callable[[dict], Policy]
    if args.policy == "remote":
        shared = RemotePolicy(remote_endpoint(settings))
        factory = lambda job: shared
    else:
        plan = load_plan(args, settings.chunk_size)
        policy_class = TruncationPolicy if args.policy == "truncation" else OraclePolicy
        try:
            policy_class(plan, config.tool_set)
        except PlanError as exc:
            raise UsageError(exc.message)
        factory = lambda job: policy_class(plan, config.tool_set)

    jobs = [
        {"config": config, "corpus": corpus, "query": query, "golden_answer": args.golden, "tag": args.tag}
        for _ in range(args.repeats)
    ]
    trajectories = asyncio.run(run_episodes(jobs, factory, max_concurrency=settings.jobs, index_cache=cache))

    outputs = [TrajectoryStore.write(trajectory, args.out) for trajectory in trajectories]
    write_manifest("run", argv, args.out, settings, {"corpus": args.corpus}, outputs)
    for trajectory in trajectories:
        print(json.dumps({
            "trajectory_id": trajectory.trajectory_id,
            "status": trajectory.status.value,
            "rounds": trajectory.rounds,
            "peak_tokens": max(trajectory.token_trace),
            "answer": trajectory.final_answer,
        }))
    if any(t.transport_error for t in trajectories):
        return EXIT_DEPENDENCY
    return EXIT_OK if all(t.status == EpisodeStatus.FINISHED for t in trajectories) else EXIT_ABORTED


def cmd_replay(args: argparse.Namespace, argv: Sequence[str]) -> int:
    trajectory = TrajectoryStore.read(args.trajectory)
    corpus = InputValidator.read_text_file(args.corpus)
    report = asyncio.run(replay_trajectory(trajectory, corpus, IndexCache(args.index_cache_dir)))
    print(report.model_dump_json(indent=2))
    if args.out:
        path = Path(args.out) / f"replay_{trajectory.trajectory_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        write_manifest("replay", argv, args.out, None,
                       {"trajectory": args.trajectory, "corpus": args.corpus}, [path])
    return EXIT_OK if report.matched else EXIT_ABORTED


def cmd_gen_niah(args: argparse.Namespace, argv: Sequence[str]) -> int:
    try:
        lengths = parse_lengths(args.lengths)
    except ValueError as exc:
        raise UsageError(str(exc))
    grid = BenchGrid(lengths=lengths, instances_per_cell=args.per_cell, seed=args.seed, repeats=args.repeats)
    counter = TokenCounter(scheme=args.counter or "whitespace")
    instances = generate_grid(grid, counter)
    manifest_path = write_instances(instances, grid, args.out, counter.scheme.value)
    write_manifest("gen-niah", argv, args.out, None, {}, [manifest_path], seeds={"seed": grid.seed})
    print(f"wrote {len(instances)} instances to {manifest_path}")
    return EXIT_OK


def grid_policies(names: Sequence[str], settings: RunSettings) -> Dict[str, Callable[[NiahInstance, EpisodeConfig], Policy]]:
    policies: Dict[str, Callable[[NiahInstance, EpisodeConfig], Policy]] = {}
    for name in names:
        if name == "oracle":
            policies[name] = lambda instance, config: OraclePolicy(niah_plan(instance), config.tool_set)
        elif name == "truncation":
            policies[name] = lambda instance, config: TruncationPolicy(niah_plan(instance), config.tool_set)
        else:
            shared = RemotePolicy(remote_endpoint(settings))
            policies[name] = lambda instance, config, shared=shared: shared
    return policies


def cmd_run_grid(args: argparse.Namespace, argv: Sequence[str]) -> int:
    settings = settings_from(args)
    manifest, instances = load_instances(args.manifest)
    repeats = args.repeats or manifest.grid.repeats
    base = episode_config(settings).model_copy(update={"counter": TokenCounter(scheme=manifest.counter_scheme)})
    policies = grid_policies(args.policy or ["oracle"], settings)

    trajectory_dir = Path(args.out) / "trajectories" if args.keep_trajectories else None
    on_trajectory = None
    if trajectory_dir is not None:
        on_trajectory = lambda name, trajectory: TrajectoryStore.write(trajectory, trajectory_dir / name)

    records = asyncio.run(run_grid(
        instances, policies, base, repeats=repeats, jobs=settings.jobs,
        index_cache=IndexCache(settings.index_cache_dir), on_trajectory=on_trajectory,
    ))
    fmt = TableFormat(args.format)
    accuracy = accuracy_table(records)
    outputs = [
        GridExporter.write(records, Path(args.out) / "records.csv"),
        TableExporter.write(accuracy, Path(args.out) / "accuracy", fmt),
        TableExporter.write(position_table(records), Path(args.out) / "accuracy_by_position", fmt),
    ]
    write_manifest("run-grid", argv, args.out, settings, {"manifest": args.manifest}, outputs,
                   seeds={"grid_seed": manifest.grid.seed})
    print(TableExporter.render(accuracy, TableFormat.MARKDOWN))
    if any(record.transport_error for record in records):
        logger.error("some grid episodes lost their policy endpoint; they are graded incorrect")
        return EXIT_DEPENDENCY
    return EXIT_OK


def cmd_forge(args: argparse.Namespace, argv: Sequence[str]) -> int:
    trajectories = TrajectoryStore.load_dir(args.trajectories)
    caps = parse_caps(args.caps)
    judge = None
    if args.judge_endpoint:
        if not InputValidator.validate_endpoint_url(args.judge_endpoint):
            raise UsageError(f"invalid judge endpoint URL: {args.judge_endpoint}")
        endpoint = RemoteEndpoint(
            base_url=args.judge_endpoint,
            model_name=args.judge_model or "judge",
            auth_token=SecretStr(os.environ.get(args.api_key_env or "STATEAGENT_API_KEY", "")),
            sampling=SamplingParams(temperature=0.0),
        )
        judge = LLMJudgeGrader(ChatCompletionsClient(endpoint))
    grader = TwoLayerGrader(judge=judge)
    rules = ProcessRules(prune_window=args.prune_window, require_full_scan=not args.allow_partial_scan)

    result = asyncio.run(forge_dataset(trajectories, grader, rules=rules, caps=caps, seed=args.seed))
    out = Path(args.out)
    fmt = TableFormat(args.format)
    report = funnel_table(result.reports)
    outputs = [
        SampleExporter.write_samples(result.samples, out / "samples.jsonl"),
        TableExporter.write(report.set_index("Source"), out / "funnel", fmt),
    ]
    (out / "balance.json").write_text(result.balance.model_dump_json(indent=2), encoding="utf-8")
    outputs.append(out / "balance.json")

    if args.rl_snapshots:
        groups: Dict[str, list] = {}
        for trajectory in trajectories:
            groups.setdefault(trajectory.query, []).append(trajectory)
        batch = []
        for offset, group in enumerate(groups.values()):
            if len(group) < 2:
                logger.warning("skipping rollout group of size %d (need at least 2)", len(group))
                continue
            batch.extend(asyncio.run(build_rl_batch(group, grader, args.rl_snapshots, seed=args.seed + offset)))
        outputs.append(SampleExporter.write_rl_batch(batch, out / "rl_batch.jsonl"))

    write_manifest("forge", argv, out, None, {}, outputs, seeds={"seed": args.seed})
    print(TableExporter.render(report.set_index("Source"), TableFormat.MARKDOWN))
    return EXIT_OK


def cmd_stats(args: argparse.Namespace, argv: Sequence[str]) -> int:
    trajectories = TrajectoryStore.load_dir(args.trajectories)
    tags = [tag.strip() for tag in args.tags.split(",")] if args.tags else None
    table = tool_usage_stats(trajectories, tags)
    fmt = TableFormat(args.format)
    if args.out:
        path = TableExporter.write(table, Path(args.out) / "tool_usage", fmt)
        write_manifest("stats", argv, args.out, None, {}, [path])
    print(TableExporter.render(table, fmt), end="")
    return EXIT_OK


# parser

def _add_episode_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("episode settings (override --config)")
    group.add_argument("--config", type=Path, help="JSON config file")
    group.add_argument("--budget", "--token-budget", dest="token_budget", type=int, help="visible-context token budget")
    group.add_argument("--rounds", "--rounds-budget", dest="rounds_budget", type=int, help="soft round budget shown to the policy")
    group.add_argument("--max-rounds", type=int)
    group.add_argument("--no-search", action="store_true", help="disable searchEngine")
    group.add_argument("--delete-mode", choices=[mode.value for mode in DeleteMode])
    group.add_argument("--prompt", choices=["compact", "agentic"])
    group.add_argument("--counter", choices=["whitespace", "chars_div4"])
    group.add_argument("--chunk-size", type=int)
    group.add_argument("--endpoint", help="chat-completions base URL for the remote policy")
    group.add_argument("--model")
    group.add_argument("--api-key-env", help="environment variable holding the endpoint token")
    group.add_argument("--temperature", type=float)
    group.add_argument("--jobs", type=int, help="episodes run in parallel")
    group.add_argument("--seed", type=int)
    group.add_argument("--index-cache-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stateagent", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)
    formats = [fmt.value for fmt in TableFormat]

    run = commands.add_parser("run", help="run episodes over one corpus")
    run.add_argument("--corpus", type=Path, required=True)
    run.add_argument("--query")
    run.add_argument("--query-file", type=Path)
    run.add_argument("--golden")
    run.add_argument("--tag", default="default")
    run.add_argument("--policy", choices=POLICIES, default="oracle")
    run.add_argument("--strategy", choices=[mode.value for mode in ScanMode], default=ScanMode.LINEAR_SCAN.value)
    run.add_argument("--plan", type=Path, help="oracle plan as JSON")
    run.add_argument("--note-rule", action="append", help="KEY=REGEX with a named group 'value'")
    run.add_argument("--target-key", action="append")
    run.add_argument("--repeats", type=int, default=1)
    run.add_argument("--out", type=Path, default=Path("runs"))
    _add_episode_flags(run)

    replay = commands.add_parser("replay", help="re-execute a recorded trajectory")
    replay.add_argument("--trajectory", type=Path, required=True)
    replay.add_argument("--corpus", type=Path, required=True)
    replay.add_argument("--out", type=Path)
    replay.add_argument("--index-cache-dir")

    gen = commands.add_parser("gen-niah", help="generate needle-in-a-haystack instances")
    gen.add_argument("--lengths", default="32K..2M", help="'32K..2M' or '32K,64K'")
    gen.add_argument("--per-cell", type=int, default=60)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--repeats", type=int, default=1)
    gen.add_argument("--counter", choices=["whitespace", "chars_div4"])
    gen.add_argument("--out", type=Path, required=True)

    grid = commands.add_parser("run-grid", help="run policies over a generated NIAH grid")
    grid.add_argument("--manifest", type=Path, required=True)
    grid.add_argument("--policy", action="append", choices=POLICIES)
    grid.add_argument("--repeats", type=int)
    grid.add_argument("--keep-trajectories", action="store_true")
    grid.add_argument("--format", choices=formats, default=TableFormat.MARKDOWN.value)
    grid.add_argument("--out", type=Path, required=True)
    _add_episode_flags(grid)

    forge = commands.add_parser("forge", help="filter, explode and balance trajectories into samples")
    forge.add_argument("--trajectories", type=Path, required=True)
    forge.add_argument("--out", type=Path, required=True)
    forge.add_argument("--caps", help="ACTION=SHARE pairs, e.g. deleteContext=0.4")
    forge.add_argument("--prune-window", type=int, default=2)
    forge.add_argument("--allow-partial-scan", action="store_true")
    forge.add_argument("--judge-endpoint")
    forge.add_argument("--judge-model")
    forge.add_argument("--api-key-env")
    forge.add_argument("--rl-snapshots", type=int, help="also write an RL batch with k snapshots per trajectory")
    forge.add_argument("--seed", type=int, default=0)
    forge.add_argument("--format", choices=formats, default=TableFormat.MARKDOWN.value)

    stats = commands.add_parser("stats", help="tool-use pattern per tag")
    stats.add_argument("--trajectories", type=Path, required=True)
    stats.add_argument("--tags")
    stats.add_argument("--out", type=Path)
    stats.add_argument("--format", choices=formats, default=TableFormat.MARKDOWN.value)
    return parser


COMMANDS: Dict[str, Callable[[argparse.Namespace, Sequence[str]], int]] = {
    "run": cmd_run,
    "replay": cmd_replay,
    "gen-niah": cmd_gen_niah,
    "run-grid": cmd_run_grid,
    "forge": cmd_forge,
    "stats": cmd_stats,
}


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args, argv)
    except (UsageError, FileNotFoundError, ValidationError, ValueError) as exc:
        logger.error("usage error: %s", exc)
        return EXIT_USAGE
    except (TransportError, GraderUnavailable) as exc:
        logger.error("dependency failure: %s", exc.message)
        return EXIT_DEPENDENCY
    except StateAgentError as exc:
        logger.error("%s: %s", exc.code, exc.message)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
