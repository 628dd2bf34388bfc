from enum import Enum
from math import ceil
from typing import Any, Callable, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, PrivateAttr, model_validator

from .tools import DeleteMode, ToolCall


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    TOOL = "tool"


class Visibility(str, Enum):
    VISIBLE = "visible"
    STUBBED = "stubbed"
    TOOLCALLS_STUBBED = "toolcalls_stubbed"


class CountingScheme(str, Enum):
    WHITESPACE = "whitespace"
    CHARS_DIV4 = "chars_div4"
    EXTERNAL = "external"


STUB_TEMPLATE = "[deleted msg {id}]"


class Message(BaseModel):
    msg_id: Optional[int] = None
    role: Role
    content: str = ""
    tool_calls: List[ToolCall] = Field(default_factory=list)
    # Set on tool-role messages; pairs the observation with its call.
    tool_call_id: Optional[str] = None
    visibility: Visibility = Visibility.VISIBLE
    stub_text: Optional[str] = None

    @model_validator(mode="after")
    def _check_visibility(self) -> "Message":
        if self.visibility == Visibility.TOOLCALLS_STUBBED:
            if self.role != Role.ASSISTANT or not self.tool_calls:
                raise ValueError("toolcalls_stubbed requires an assistant message with tool calls")
        return self

    @property
    def is_deleted(self) -> bool:
        return self.visibility != Visibility.VISIBLE


class StateEvent(BaseModel):
    """One line of the trajectory-event log; replaying the log rebuilds the state."""

    op: str = Field(pattern="^(append|delete)$")
    msg_id: int
    mode: Optional[DeleteMode] = None
    payload: Optional[Dict[str, Any]] = None


class InteractionState(BaseModel):
    query: str
    messages: List[Message] = Field(default_factory=list)
    round: int = Field(0, ge=0)
    token_budget: int = Field(32000, gt=0)
    rounds_budget: int = Field(150, gt=0)
    max_rounds: int = Field(200, gt=0)

    next_msg_id: int = 0
    query_msg_id: Optional[int] = None
    log: List[StateEvent] = Field(default_factory=list)

    # msg_id -> (visibility, rendered block); content never changes after append
    _blocks: Dict[int, Tuple[Visibility, str]] = PrivateAttr(default_factory=dict)

    def get(self, msg_id: int) -> Optional[Message]:
        # ids are dense and assigned in append order
        if 0 <= msg_id < len(self.messages):
            return self.messages[msg_id]
        return None


class TokenCounter(BaseModel):
    """Deterministic token counting used for every budget decision."""

    scheme: CountingScheme = CountingScheme.WHITESPACE
    chars_per_token: int = Field(4, ge=1)

    _encoder: Optional[Callable[[str], int]] = PrivateAttr(default=None)

    @classmethod
    def external(cls, encoder: Callable[[str], int]) -> "TokenCounter":
        counter = cls(scheme=CountingScheme.EXTERNAL)
        counter._encoder = encoder
        return counter

    def count(self, text: str) -> int:
        if not text:
            return 0
        if self.scheme == CountingScheme.WHITESPACE:
            return len(text.split())
        if self.scheme == CountingScheme.CHARS_DIV4:
            return ceil(len(text) / self.chars_per_token)
        if self._encoder is None:
            raise ValueError("external counting scheme requires an encoder callable")
        return int(self._encoder(text))

    def truncate(self, text: str, max_tokens: int) -> str:
        """Prefix of ``text`` holding at most ``max_tokens`` tokens."""
        if self.count(text) <= max_tokens:
            return text
        if self.scheme == CountingScheme.CHARS_DIV4:
            return text[: max_tokens * self.chars_per_token]
        words = text.split()
        return " ".join(words[:max_tokens])
