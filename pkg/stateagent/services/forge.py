import asyncio
import logging
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from ..errors import InvalidGroup, ReplayMismatch
from ..models.context import InteractionState, Role
from ..models.tools import ToolName
from ..models.training import (
    BalanceReport,
    Correctness,
    FilterReport,
    ProcessRules,
    RewardRecord,
    RLSample,
    TrainingSample,
)
from ..models.trajectory import EpisodeStatus, ScanMode, Trajectory
from .context import apply_event, render_block, serialize
from .engine import capture_snapshots
from .grading import Grader
from .spellbook import manifest_lines

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6
FUNNEL_COLUMNS = [
    "Source", "Questions", "Trajs", "Outcome Filter", "Process Filter", "Samples", "Action Balancing",
]


# outcome-based reject sampling

async def grade_trajectory(trajectory: Trajectory, grader: Grader) -> Correctness:
    if not trajectory.finished or trajectory.final_answer is None:
        return Correctness.NOT_APPLICABLE
    if trajectory.golden_answer is None:
        raise ValueError(f"trajectory {trajectory.trajectory_id} has no golden answer")
    return await grader.grade(trajectory.query, trajectory.final_answer, trajectory.golden_answer)


async def outcome_filter(
    trajectories: Sequence[Trajectory], grader: Grader, max_concurrency: int = 8
) -> Tuple[List[Trajectory], FilterReport]:
    """Keep trajectories whose final answer is judged correct. Grader failures abort the filter."""
    semaphore = asyncio.Semaphore(max_concurrency)

    async def judge(trajectory: Trajectory) -> Correctness:
        async with semaphore:
            return await grade_trajectory(trajectory, grader)

    verdicts = await asyncio.gather(*(judge(t) for t in trajectories))
    passed = [t for t, verdict in zip(trajectories, verdicts) if verdict == Correctness.CORRECT]
    report = FilterReport(
        questions=len({t.query for t in trajectories}),
        total=len(trajectories),
        outcome_pass=len(passed),
        process_pass=len(passed),
    )
    return passed, report


# process-based reject sampling

def _deleted_ids_by_round(trajectory: Trajectory) -> Dict[int, set]:
    deleted: Dict[int, set] = {}
    for event in trajectory.events_for(ToolName.DELETE_CONTEXT):
        if event.observation is not None and event.observation.ok:
            deleted[event.round] = set(event.observation.data.get("deleted", []))
    return deleted


def prunes_in_time(trajectory: Trajectory, window: int = 2) -> bool:
    """Every chunk observation is deleted within ``window`` later rounds."""
    deleted = _deleted_ids_by_round(trajectory)
    for event in trajectory.events_for(ToolName.READ_CHUNK):
        observation = event.observation
        if observation is None or not observation.ok:
            continue
        rounds = range(event.round + 1, event.round + window + 1)
        if not any(observation.produced_msg_id in deleted.get(r, ()) for r in rounds):
            return False
    return True


def reads_complete_scan(trajectory: Trajectory) -> bool:
    """A declared linear scan reads every chunk id of the last built index."""
    if trajectory.scan_mode != ScanMode.LINEAR_SCAN:
        return True
    num_chunks = None
    for event in trajectory.events_for(ToolName.BUILD_INDEX):
        if event.observation is not None and event.observation.ok:
            num_chunks = event.observation.data["num_chunks"]
    if num_chunks is None:
        return False
    read = {
        event.observation.data["chunk_id"]
        for event in trajectory.events_for(ToolName.READ_CHUNK)
        if event.observation is not None and event.observation.ok
    }
    return read == set(range(num_chunks))


def process_filter(
    trajectories: Sequence[Trajectory], rules: Optional[ProcessRules] = None
) -> Tuple[List[Trajectory], FilterReport]:
    rules = rules or ProcessRules()
    passed = [
        t for t in trajectories
        if prunes_in_time(t, rules.prune_window) and (not rules.require_full_scan or reads_complete_scan(t))
    ]
    report = FilterReport(
        questions=len({t.query for t in trajectories}),
        total=len(trajectories),
        outcome_pass=len(trajectories),
        process_pass=len(passed),
    )
    return passed, report


# sample construction

def explode_samples(trajectory: Trajectory) -> List[TrainingSample]:
    """One sample per assistant step, input = replayed state just before that step."""
    config = trajectory.config
    tools = manifest_lines(config.tool_set)
    state = InteractionState(query=trajectory.query, token_budget=config.token_budget,
                             rounds_budget=config.rounds_budget, max_rounds=config.max_rounds)
    events = trajectory.state_log
    samples: List[TrainingSample] = []
    step = 0

    for position, log_event in enumerate(events):
        payload = log_event.payload or {}
        if log_event.op == "append" and payload.get("role") == Role.ASSISTANT.value:
            if step >= len(trajectory.events):
                raise ReplayMismatch(f"log has more assistant turns than the {len(trajectory.events)} recorded events")
            input_context = serialize(state, config.system_prompt, tools)
            apply_event(state, log_event)
            target = render_block(state, state.messages[-1])
            event = trajectory.events[step]
            start = len(input_context.encode("utf-8"))
            samples.append(
                TrainingSample(
                    sample_id=f"{trajectory.trajectory_id}:{step}",
                    source_trajectory_id=trajectory.trajectory_id,
                    step_index=step,
                    primary_action=event.tool_name if not event.malformed and event.tool_name else "malformed",
                    input_context=input_context,
                    target=target,
                    loss_mask=[(start, start + len(target.encode("utf-8")))],
                    tag=trajectory.tag,
                )
            )
            step += 1
            continue

        apply_event(state, log_event)
        if log_event.op == "append" and payload.get("role") == Role.TOOL.value:
            recorded = trajectory.events[step - 1].observation if step else None
            if recorded is None or recorded.content != state.messages[-1].content:
                raise ReplayMismatch(
                    f"trajectory {trajectory.trajectory_id}: observation at step {step - 1} diverges from the log"
                )

    if step != len(trajectory.events):
        raise ReplayMismatch(f"log holds {step} assistant turns, trajectory records {len(trajectory.events)}")
    return samples


def balance_actions(
    samples: Sequence[TrainingSample], caps: Dict[str, float], seed: int = 0
) -> Tuple[List[TrainingSample], BalanceReport]:
    """Downsample actions whose share exceeds their cap; uncapped actions are untouched.

    Kept counts solve x_a = min(c_a, floor(cap_a * T)) with T the kept total,
    iterated to a fixed point. Selection within an action is seeded and keeps order.
    """
    counts = Counter(sample.primary_action for sample in samples)
    kept = {action: count for action, count in counts.items()}
    capped = [action for action in kept if action in caps]
    uncapped_total = sum(count for action, count in counts.items() if action not in caps)

    while True:
        total = uncapped_total + sum(kept[action] for action in capped)
        updated = {action: min(counts[action], int(np.floor(caps[action] * total))) for action in capped}
        if all(updated[action] == kept[action] for action in capped):
            break
        kept.update(updated)

    rng = np.random.default_rng(seed)
    selected = set()
    for action in sorted(counts):
        indices = [i for i, sample in enumerate(samples) if sample.primary_action == action]
        if kept[action] >= len(indices):
            selected.update(indices)
        else:
            selected.update(int(i) for i in rng.choice(indices, size=kept[action], replace=False))

    balanced = [sample for i, sample in enumerate(samples) if i in selected]
    report = BalanceReport(
        before=dict(counts),
        after=dict(Counter(sample.primary_action for sample in balanced)),
        caps=dict(caps),
    )
    return balanced, report


# rewards and advantages

def reward_for(correct: bool, formatted: bool, finished: bool) -> float:
    if formatted and finished:
        return 1.0 if correct else -0.5
    return -1.0


async def compute_reward(
    trajectory: Trajectory, grader: Grader, max_answer_length: Optional[int] = None
) -> RewardRecord:
    finished = trajectory.status == EpisodeStatus.FINISHED
    answer = trajectory.final_answer
    formatted = finished and answer is not None and (
        max_answer_length is None or len(answer) <= max_answer_length
    )
    correctness = await grade_trajectory(trajectory, grader)
    return RewardRecord(
        trajectory_id=trajectory.trajectory_id,
        reward=reward_for(correctness == Correctness.CORRECT, formatted, finished),
        correctness=correctness,
        formatted=formatted,
        finished=finished,
    )


def group_advantage(rewards: Sequence[float], normalize_std: bool = True) -> List[float]:
    values = np.asarray(rewards, dtype=np.float64)
    if values.size < 2:
        raise InvalidGroup(f"advantage needs a group of at least 2 rollouts, got {values.size}")
    centered = values - values.mean()
    if np.all(values == values[0]):
        logger.debug("degenerate rollout group (all rewards %.2f); advantages are zero", values[0])
        return [0.0] * values.size
    if normalize_std:
        centered = centered / max(float(values.std()), STD_FLOOR)
    return [float(a) for a in centered]


async def build_rl_batch(
    group: Sequence[Trajectory],
    grader: Grader,
    k: int,
    seed: int = 0,
    normalize_std: bool = True,
    max_answer_length: Optional[int] = None,
) -> List[RLSample]:
    """Rollout group -> rewards -> group advantages -> k snapshots per trajectory carrying them."""
    rewards = [await compute_reward(t, grader, max_answer_length) for t in group]
    advantages = group_advantage([r.reward for r in rewards], normalize_std=normalize_std)
    group_id = group[0].query if group else None
    batch = []
    for offset, (trajectory, record, advantage) in enumerate(zip(group, rewards, advantages)):
        for snapshot in capture_snapshots(trajectory, k, seed=seed + offset):
            batch.append(
                RLSample(
                    trajectory_id=trajectory.trajectory_id,
                    snapshot=snapshot,
                    reward=record.reward,
                    advantage=advantage,
                    group_id=group_id,
                )
            )
    return batch


# full SFT pipeline

class ForgeResult(BaseModel):
    samples: List[TrainingSample] = Field(default_factory=list)
    reports: List[FilterReport] = Field(default_factory=list)
    balance: BalanceReport = Field(default_factory=BalanceReport)


async def forge_dataset(
    trajectories: Sequence[Trajectory],
    grader: Grader,
    rules: Optional[ProcessRules] = None,
    caps: Optional[Dict[str, float]] = None,
    seed: int = 0,
) -> ForgeResult:
    """filter by outcome -> filter by process -> explode -> balance, with a funnel per source tag."""
    by_tag: Dict[str, List[Trajectory]] = {}
    for trajectory in trajectories:
        by_tag.setdefault(trajectory.tag, []).append(trajectory)

    result = ForgeResult()
    exploded: List[TrainingSample] = []
    for tag in sorted(by_tag):
        group = by_tag[tag]
        outcome_passed, outcome_report = await outcome_filter(group, grader)
        process_passed, _ = process_filter(outcome_passed, rules)
        samples = [sample for t in process_passed for sample in explode_samples(t)]
        exploded.extend(samples)
        result.reports.append(
            FilterReport(
                source=tag,
                questions=outcome_report.questions,
                total=len(group),
                outcome_pass=len(outcome_passed),
                process_pass=len(process_passed),
                samples_before_balance=len(samples),
                samples_after_balance=len(samples),
            )
        )
        logger.info(
            "forge %s: %d trajs -> %d outcome -> %d process -> %d samples",
            tag, len(group), len(outcome_passed), len(process_passed), len(samples),
        )

    result.samples, result.balance = balance_actions(exploded, caps or {}, seed=seed)
    kept_by_tag = Counter(sample.tag for sample in result.samples)
    for report in result.reports:
        report.samples_after_balance = kept_by_tag.get(report.source, 0)
    return result


def funnel_table(reports: Sequence[FilterReport]) -> pd.DataFrame:
    rows = [
        [r.source, r.questions, r.total, r.outcome_pass, r.process_pass, r.samples_before_balance, r.samples_after_balance]
        for r in reports
    ]
    frame = pd.DataFrame(rows, columns=FUNNEL_COLUMNS)
    total = ["Total"] + [int(frame[column].sum()) for column in FUNNEL_COLUMNS[1:]]
    frame.loc[len(frame)] = total
    return frame
