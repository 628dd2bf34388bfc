from enum import Enum
from typing import Any, Dict, List, Optional, Tuple
from uuid import uuid4

from pydantic import BaseModel, Field, model_validator

from ..prompts import load_prompt
from .context import StateEvent, TokenCounter
from .tools import Observation, ToolCall, ToolName, ToolSet


class EpisodeStatus(str, Enum):
    FINISHED = "finished"
    BUDGET_EXCEEDED = "budget_exceeded"
    ROUNDS_EXCEEDED = "rounds_exceeded"
    PROTOCOL_ERROR = "protocol_error"


class ScanMode(str, Enum):
    LINEAR_SCAN = "linear_scan"
    KEYWORD_SEARCH = "keyword_search"


class EpisodeConfig(BaseModel):
    token_budget: int = Field(32000, gt=0)
    rounds_budget: int = Field(150, gt=0)
    max_rounds: int = Field(200, gt=0)
    tool_set: ToolSet = Field(default_factory=ToolSet)
    system_prompt: str = Field(default_factory=load_prompt)
    counter: TokenCounter = Field(default_factory=TokenCounter)

    # spellbook defaults
    default_chunk_size: int = Field(4096, ge=512, le=12000)
    short_text_tokens: int = Field(8000, gt=0)
    search_top_k: int = Field(5, ge=1, le=50)
    snippet_tokens: int = Field(200, ge=1)

    max_protocol_errors: int = Field(3, ge=1)
    record_snapshots: bool = True

    @model_validator(mode="after")
    def _check_rounds(self) -> "EpisodeConfig":
        if self.max_rounds < self.rounds_budget:
            raise ValueError(
                f"max_rounds ({self.max_rounds}) must be >= rounds_budget ({self.rounds_budget})"
            )
        return self


class TrajectoryEvent(BaseModel):
    """One assistant round: the policy decision as emitted plus what the environment answered."""

    round: int
    thought: str = ""
    tool_name: Optional[str] = None
    arguments: Dict[str, Any] = Field(default_factory=dict)
    call_id: Optional[str] = None
    declared_mode: Optional[ScanMode] = None
    # protocol error reported by the policy client (reply without a usable call)
    error: Optional[str] = None

    observation: Optional[Observation] = None
    feedback: Optional[str] = None
    malformed: bool = False

    @property
    def action(self) -> Optional[ToolCall]:
        if self.tool_name not in {name.value for name in ToolName} or self.call_id is None:
            return None
        return ToolCall(name=ToolName(self.tool_name), args=self.arguments, call_id=self.call_id)

    def is_tool(self, name: ToolName) -> bool:
        return self.tool_name == name.value


class Snapshot(BaseModel):
    round: int
    msg_id: int
    serialized_state: str
    # [start, end) UTF-8 byte ranges of serialized_state that carry loss
    loss_mask: List[Tuple[int, int]] = Field(default_factory=list)

    def masked_text(self) -> str:
        data = self.serialized_state.encode("utf-8")
        return "".join(data[start:end].decode("utf-8") for start, end in self.loss_mask)


class Trajectory(BaseModel):
    trajectory_id: str = Field(default_factory=lambda: uuid4().hex)
    tag: str = "default"
    query: str
    golden_answer: Optional[str] = None
    corpus_sha256: Optional[str] = None
    config: EpisodeConfig = Field(default_factory=EpisodeConfig)

    scan_mode: Optional[ScanMode] = None
    events: List[TrajectoryEvent] = Field(default_factory=list)
    final_answer: Optional[str] = None
    status: Optional[EpisodeStatus] = None
    # set when the policy's transport gave up; the episode closes as protocol_error
    transport_error: Optional[str] = None

    snapshots: List[Snapshot] = Field(default_factory=list)
    # visible tokens after the initial query and after every round
    token_trace: List[int] = Field(default_factory=list)
    state_log: List[StateEvent] = Field(default_factory=list)
    final_context_sha256: Optional[str] = None

    @property
    def rounds(self) -> int:
        return len(self.events)

    @property
    def finished(self) -> bool:
        return self.status == EpisodeStatus.FINISHED

    def events_for(self, name: ToolName) -> List[TrajectoryEvent]:
        return [event for event in self.events if event.is_tool(name)]


class ReplayReport(BaseModel):
    trajectory_id: str
    matched: bool
    rounds_compared: int = 0
    mismatch: Optional[str] = None
    status: Optional[EpisodeStatus] = None
    final_context_sha256: Optional[str] = None
