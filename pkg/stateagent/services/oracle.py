import json
import logging
from typing import Any, Dict, Generator, List, Optional

from ..errors import PlanExhausted
from ..models.context import Role
from ..models.policy import NoteRule, OraclePlan, PolicyDecision, PolicyView
from ..models.tools import ToolName, ToolSet
from ..models.trajectory import ScanMode
from .policy import Policy

logger = logging.getLogger(__name__)

TRUNCATION_TOKENS = 128_000

Header = Optional[Dict[str, Any]]


def parse_observation_header(view: PolicyView) -> Header:
    """JSON header of the latest tool observation, if the last message is one."""
    if not view.messages:
        return None
    last = view.messages[-1]
    if last.role != Role.TOOL or last.is_deleted:
        return None
    first_line = last.content.split("\n", 1)[0]
    try:
        return json.loads(first_line)
    except ValueError:
        return None


def observation_body(view: PolicyView) -> str:
    last = view.messages[-1]
    parts = last.content.split("\n", 1)
    return parts[1] if len(parts) > 1 else ""


class OraclePolicy(Policy):
    """Scripted expert: analyze, index, [search,] read, note, delete, finish.

    The script is a generator that yields one decision per round and receives
    the header of the observation that answered it. Message ids are taken from
    those headers, never from engine internals.
    """

    name = "oracle"

    def __init__(self, plan: OraclePlan, tool_set: ToolSet):
        plan.validate_for(tool_set)
        self.plan = plan
        self.tool_set = tool_set
        self.notes: Dict[str, str] = {}
        self._script: Optional[Generator[PolicyDecision, Header, None]] = None
        self._view: Optional[PolicyView] = None
        self._calls = 0

    async def step(self, view: PolicyView) -> PolicyDecision:
        self._view = view
        try:
            if self._script is None:
                self._script = self._run()
                return next(self._script)
            return self._script.send(parse_observation_header(view))
        except StopIteration:
            exc = PlanExhausted("oracle plan ran out of actions")
            logger.debug("%s; finishing with best-known answer", exc.message)
            return self._decide(ToolName.FINISH, {"answer": self._answer()}, "Plan exhausted; answering from notes.")

    def _decide(
        self, tool: ToolName, arguments: Dict[str, Any], thought: str, mode: Optional[ScanMode] = None
    ) -> PolicyDecision:
        self._calls += 1
        return PolicyDecision(
            thought=thought,
            tool_name=tool.value,
            arguments=arguments,
            call_id=f"call_{self._calls}",
            declared_mode=mode,
        )

    def _answer(self) -> str:
        key = self.plan.resolved_answer_key
        return self.notes.get(key, "") if key else ""

    def _run(self) -> Generator[PolicyDecision, Header, None]:
        plan = self.plan
        header = yield self._decide(
            ToolName.ANALYZE_TEXT,
            {},
            f"Plan: {plan.strategy.value.replace('_', ' ')}. Checking the size of the attached text first.",
            mode=plan.strategy,
        )
        if not header or header.get("status") != "ok" or header.get("tokens", 0) == 0:
            yield self._decide(ToolName.FINISH, {"answer": self._answer()}, "Nothing to read.")
            return

        header = yield self._decide(
            ToolName.BUILD_INDEX, {"chunk_size": plan.chunk_size}, f"Indexing in chunks of {plan.chunk_size} tokens."
        )
        if not header or header.get("status") != "ok":
            yield self._decide(ToolName.FINISH, {"answer": self._answer()}, "Could not index the text.")
            return
        num_chunks = header["num_chunks"]
        reads = 0

        if plan.strategy == ScanMode.LINEAR_SCAN:
            for chunk_id in range(num_chunks):
                if plan.truncate_tokens is not None and (chunk_id + 1) * plan.chunk_size > plan.truncate_tokens:
                    break
                yield from self._read_cycle(chunk_id, num_chunks, self.plan.note_schedule)
                reads += 1
                yield from self._maybe_check_budget(reads)
        else:
            for key in plan.target_keys:
                header = yield self._decide(
                    ToolName.SEARCH_ENGINE, {"query": key, "top_k": plan.top_k}, f"Searching for {key}."
                )
                hits = [hit["chunk_id"] for hit in (header or {}).get("hits", [])]
                rules = [rule for rule in plan.note_schedule if rule.key == key] or plan.note_schedule
                for chunk_id in hits:
                    yield from self._read_cycle(chunk_id, num_chunks, rules)
                    reads += 1
                    yield from self._maybe_check_budget(reads)
                    if all(rule.key in self.notes for rule in rules):
                        break

        yield self._decide(ToolName.FINISH, {"answer": self._answer()}, "Answering from my notes.")

    def _read_cycle(self, chunk_id: int, num_chunks: int, rules: List[NoteRule]):
        header = yield self._decide(
            ToolName.READ_CHUNK, {"chunk_id": chunk_id}, f"Reading chunk {chunk_id + 1} of {num_chunks}."
        )
        if not header or header.get("status") != "ok":
            return
        read_msg_id = header["msg_id"]
        text = observation_body(self._view)

        to_delete = [read_msg_id]
        for rule in rules:
            if rule.key in self.notes:
                continue
            value = rule.match(text)
            if value is None:
                continue
            note_header = yield self._decide(
                ToolName.NOTE, {"key": rule.key, "text": value}, f"Found {rule.key}; recording it."
            )
            if note_header and note_header.get("status") == "ok":
                self.notes[rule.key] = value
                to_delete.append(note_header["msg_id(invoking_assistant)"])

        yield self._decide(ToolName.DELETE_CONTEXT, {"msg_ids": to_delete}, "")

    def _maybe_check_budget(self, reads: int):
        every = self.plan.check_budget_every
        if every and reads % every == 0 and self.tool_set.is_enabled(ToolName.CHECK_BUDGET):
            yield self._decide(ToolName.CHECK_BUDGET, {}, "Checking the budget.")


def truncation_plan(plan: OraclePlan, truncate_tokens: int = TRUNCATION_TOKENS) -> OraclePlan:
    """Baseline that only sees the first ``truncate_tokens`` tokens of the text."""
    return plan.model_copy(update={"strategy": ScanMode.LINEAR_SCAN, "truncate_tokens": truncate_tokens})


class TruncationPolicy(OraclePolicy):
    name = "truncation"

    def __init__(self, plan: OraclePlan, tool_set: ToolSet, truncate_tokens: int = TRUNCATION_TOKENS):
        super().__init__(truncation_plan(plan, truncate_tokens), tool_set)
