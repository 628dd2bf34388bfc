import asyncio
import hashlib
import logging
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from ..errors import EpisodeClosed, MalformedResponse, TransportError, UnknownTool
from ..models.context import InteractionState, Message, Role
from ..models.policy import PolicyDecision, PolicyView
from ..models.tools import Observation, ToolCall, ToolName
from ..models.trajectory import (
    EpisodeConfig,
    EpisodeStatus,
    ReplayReport,
    Snapshot,
    Trajectory,
    TrajectoryEvent,
)
from ..utils.validators import ToolArgumentValidator
from .context import append, delete_message, render_block, serialize
from .corpus_index import IndexCache, corpus_hash
from .policy import Policy, ReplayPolicy
from .spellbook import Spellbook

logger = logging.getLogger(__name__)

MALFORMED_CODES = {"InvalidArguments", "UnknownTool"}


def apply_state_update(
    state: InteractionState,
    action: ToolCall,
    observation: Optional[Observation],
    thought: str = "",
) -> InteractionState:
    """F(s, a, o): append the action and its observation, then apply any deletions it carries."""
    append(state, Message(role=Role.ASSISTANT, content=thought, tool_calls=[action]))
    if observation is None or (action.name == ToolName.FINISH and observation.ok):
        return state

    append(state, Message(role=Role.TOOL, content=observation.content, tool_call_id=action.call_id))
    if observation.produced_msg_id is not None and observation.produced_msg_id != state.messages[-1].msg_id:
        raise RuntimeError(
            f"observation predicted msg_id {observation.produced_msg_id}, got {state.messages[-1].msg_id}"
        )
    # the deleteContext call itself stays in history
    for deletion in observation.data.get("deletions", []):
        delete_message(state, deletion["msg_id"], deletion["mode"])
    return state


def _feedback_for(decision: PolicyDecision) -> str:
    if decision.error:
        reason = decision.error
    elif decision.tool_name:
        reason = f"unknown tool {decision.tool_name!r}"
    else:
        reason = "the reply contained no tool call"
    return f"Protocol error: {reason}. Reply with a short thought and exactly one tool call."


class Episode:
    """One sequential agent loop over one corpus and query."""

    def __init__(
        self,
        config: EpisodeConfig,
        corpus: str,
        query: str,
        golden_answer: Optional[str] = None,
        tag: str = "default",
        index_cache: Optional[IndexCache] = None,
        trajectory_id: Optional[str] = None,
    ):
        if not query or not query.strip():
            raise ValueError("query must be non-empty")
        self.config = config
        self.corpus = corpus
        self.spellbook = Spellbook(corpus, config, index_cache=index_cache)
        self.state = InteractionState(
            query=query,
            token_budget=config.token_budget,
            rounds_budget=config.rounds_budget,
            max_rounds=config.max_rounds,
        )
        self.trajectory = Trajectory(
            query=query,
            golden_answer=golden_answer,
            tag=tag,
            corpus_sha256=corpus_hash(corpus),
            config=config,
        )
        if trajectory_id:
            self.trajectory.trajectory_id = trajectory_id
        self._serialized = ""
        self._tokens = 0
        self._malformed_streak = 0
        self._status: Optional[EpisodeStatus] = None

    def serialize(self) -> str:
        return serialize(self.state, self.config.system_prompt, self.spellbook.rendered_manifest)

    def _measure(self) -> int:
        self._serialized = self.serialize()
        self._tokens = self.config.counter.count(self._serialized)
        self.trajectory.token_trace.append(self._tokens)
        return self._tokens

    def _view(self) -> PolicyView:
        return PolicyView(
            serialized=self._serialized,
            system_prompt=self.config.system_prompt,
            messages=self.state.messages,
            tools=self.spellbook.manifest,
            round=self.state.round,
            visible_tokens=self._tokens,
            token_budget=self.config.token_budget,
            rounds_budget=self.config.rounds_budget,
        )

    async def run(self, policy: Policy) -> Trajectory:
        append(self.state, Message(role=Role.USER, content=self.state.query))
        self.state.query_msg_id = self.state.messages[-1].msg_id
        self._measure()
        logger.info(
            "episode %s start: policy=%s budget=%d rounds=%d/%d",
            self.trajectory.trajectory_id, policy.name, self.config.token_budget,
            self.config.rounds_budget, self.config.max_rounds,
        )

        status: Optional[EpisodeStatus] = None
        while status is None:
            try:
                decision = await policy.step(self._view())
            except MalformedResponse as exc:
                decision = PolicyDecision(thought=exc.raw_text, error=exc.message)
            except TransportError as exc:
                logger.error("episode %s: policy transport failed: %s", self.trajectory.trajectory_id, exc.message)
                self.trajectory.transport_error = exc.message
                status = self._status = EpisodeStatus.PROTOCOL_ERROR
                break
            status = self.step(decision)

        self._close(status)
        return self.trajectory

    def step(self, decision: PolicyDecision) -> Optional[EpisodeStatus]:
        """Execute one round; returns the terminal status or None to continue."""
        if self._status is not None:
            raise EpisodeClosed(f"episode already ended with status {self._status.value}")
        self._status = self._step(decision)
        return self._status

    def _step(self, decision: PolicyDecision) -> Optional[EpisodeStatus]:
        round_before = self.state.round
        serialized_before = self._serialized
        if decision.declared_mode and self.trajectory.scan_mode is None:
            self.trajectory.scan_mode = decision.declared_mode

        event = TrajectoryEvent(
            round=round_before + 1,
            thought=decision.thought,
            tool_name=decision.tool_name,
            arguments=decision.arguments,
            call_id=decision.call_id or f"call_{round_before + 1}",
            declared_mode=decision.declared_mode,
            error=decision.error,
        )
        self.trajectory.events.append(event)

        name: Optional[ToolName] = None
        if decision.tool_name is not None and decision.error is None:
            try:
                name = ToolArgumentValidator.resolve_tool(decision.tool_name)
            except UnknownTool:
                name = None

        if name is None:
            event.malformed = True
            event.feedback = _feedback_for(decision)
            append(self.state, Message(role=Role.ASSISTANT, content=decision.thought))
            append(self.state, Message(role=Role.USER, content=event.feedback))
            self._malformed_streak += 1
            logger.debug("round %d: malformed action (%s)", event.round, event.feedback)
            return self._check_limits()

        call = ToolCall(name=name, args=decision.arguments, call_id=event.call_id)
        observation = self.spellbook.execute(call, self.state)
        event.observation = observation
        logger.debug("round %d: %s -> %s", event.round, name.value, observation.status.value)

        if name == ToolName.FINISH and observation.ok:
            apply_state_update(self.state, call, None, thought=decision.thought)
            self.trajectory.final_answer = observation.data.get("answer", "")
            self._measure()
            return EpisodeStatus.FINISHED

        apply_state_update(self.state, call, observation, thought=decision.thought)
        assistant = self.state.messages[-2]
        if name == ToolName.DELETE_CONTEXT and self.config.record_snapshots:
            self._snapshot(serialized_before, assistant, event.round)

        if observation.error_code in MALFORMED_CODES:
            self._malformed_streak += 1
        else:
            self._malformed_streak = 0
        return self._check_limits()

    def _snapshot(self, serialized_before: str, assistant: Message, round_number: int) -> None:
        # a deleteContext call cannot target its own message, so the block is still visible here
        block = render_block(self.state, assistant)
        start = len(serialized_before.encode("utf-8"))
        text = serialized_before + block
        self.trajectory.snapshots.append(
            Snapshot(
                round=round_number,
                msg_id=assistant.msg_id,
                serialized_state=text,
                loss_mask=[(start, len(text.encode("utf-8")))],
            )
        )

    def _check_limits(self) -> Optional[EpisodeStatus]:
        tokens = self._measure()
        if tokens > self.config.token_budget:
            logger.info("episode %s over token budget: %d > %d", self.trajectory.trajectory_id, tokens, self.config.token_budget)
            return EpisodeStatus.BUDGET_EXCEEDED
        if self._malformed_streak >= self.config.max_protocol_errors:
            return EpisodeStatus.PROTOCOL_ERROR
        if self.state.round >= self.config.max_rounds:
            return EpisodeStatus.ROUNDS_EXCEEDED
        return None

    def _close(self, status: EpisodeStatus) -> None:
        self.trajectory.status = status
        if status != EpisodeStatus.FINISHED:
            self.trajectory.final_answer = None
        self.trajectory.state_log = list(self.state.log)
        self.trajectory.final_context_sha256 = hashlib.sha256(self._serialized.encode("utf-8")).hexdigest()
        logger.info(
            "episode %s end: status=%s rounds=%d peak_tokens=%d",
            self.trajectory.trajectory_id, status.value, self.state.round, max(self.trajectory.token_trace),
        )


async def run_episode(
    config: EpisodeConfig,
    policy: Policy,
    corpus: str,
    query: str,
    golden_answer: Optional[str] = None,
    tag: str = "default",
    index_cache: Optional[IndexCache] = None,
) -> Trajectory:
    episode = Episode(config, corpus, query, golden_answer=golden_answer, tag=tag, index_cache=index_cache)
    return await episode.run(policy)


async def run_episodes(
    jobs: Sequence[dict],
    policy_factory: Callable[[dict], Policy],
    max_concurrency: int = 4,
    index_cache: Optional[IndexCache] = None,
) -> List[Trajectory]:
    """Run many independent episodes with bounded parallelism.

    Each job is a mapping with ``config``, ``corpus``, ``query`` and optionally
    ``golden_answer`` and ``tag``; results keep the job order.
    """
    semaphore = asyncio.Semaphore(max_concurrency)
    cache = index_cache or IndexCache()

    async def run_one(job: dict) -> Trajectory:
        async with semaphore:
            return await run_episode(
                job["config"],
                policy_factory(job),
                job["corpus"],
                job["query"],
                golden_answer=job.get("golden_answer"),
                tag=job.get("tag", "default"),
                index_cache=cache,
            )

    return list(await asyncio.gather(*(run_one(job) for job in jobs)))


def capture_snapshots(trajectory: Trajectory, k: int, seed: int = 0) -> List[Snapshot]:
    """Uniformly sample min(k, available) snapshots without replacement, kept in round order."""
    available = trajectory.snapshots
    if k >= len(available):
        return list(available)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(available), size=k, replace=False))
    return [available[int(i)] for i in chosen]


def decisions_from(trajectory: Trajectory) -> Iterable[PolicyDecision]:
    for event in trajectory.events:
        yield PolicyDecision(
            thought=event.thought,
            tool_name=event.tool_name,
            arguments=event.arguments,
            call_id=event.call_id,
            declared_mode=event.declared_mode,
            error=event.error,
        )


async def replay_trajectory(
    trajectory: Trajectory, corpus: str, index_cache: Optional[IndexCache] = None
) -> ReplayReport:
    """Re-execute a recorded trajectory against a fresh environment and diff the outcome."""
    report = ReplayReport(trajectory_id=trajectory.trajectory_id, matched=False)
    if trajectory.corpus_sha256 and trajectory.corpus_sha256 != corpus_hash(corpus):
        report.mismatch = "corpus content hash differs from the recorded one"
        return report

    episode = Episode(
        trajectory.config,
        corpus,
        trajectory.query,
        golden_answer=trajectory.golden_answer,
        tag=trajectory.tag,
        index_cache=index_cache,
        trajectory_id=trajectory.trajectory_id,
    )
    replayed = await episode.run(ReplayPolicy(decisions_from(trajectory), end_error=trajectory.transport_error))
    report.status = replayed.status
    report.final_context_sha256 = replayed.final_context_sha256

    for recorded, fresh in zip(trajectory.events, replayed.events):
        report.rounds_compared += 1
        before, after = recorded.observation, fresh.observation
        if (before is None) != (after is None):
            report.mismatch = f"round {recorded.round}: observation presence differs"
            return report
        if before is not None and (before.status, before.content) != (after.status, after.content):
            report.mismatch = f"round {recorded.round}: observation differs"
            return report
        if recorded.feedback != fresh.feedback:
            report.mismatch = f"round {recorded.round}: protocol feedback differs"
            return report

    if len(trajectory.events) != len(replayed.events):
        report.mismatch = f"round count differs: {len(trajectory.events)} recorded, {len(replayed.events)} replayed"
    elif trajectory.status != replayed.status:
        report.mismatch = f"status differs: {trajectory.status} recorded, {replayed.status} replayed"
    elif trajectory.final_answer != replayed.final_answer:
        report.mismatch = "final answer differs"
    elif trajectory.final_context_sha256 != replayed.final_context_sha256:
        report.mismatch = "final serialized state differs"
    else:
        report.matched = True
    return report
