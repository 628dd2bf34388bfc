import re
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, SecretStr, field_validator

from ..errors import PlanError
from .context import Message
from .tools import ToolName, ToolSet
from .trajectory import ScanMode


class NoteRule(BaseModel):
    """Writes a note when a read chunk matches ``pattern``; the ``value`` group is stored."""

    key: str = Field(min_length=1)
    pattern: str

    @field_validator("pattern")
    @classmethod
    def _check_pattern(cls, value: str) -> str:
        compiled = re.compile(value)
        if "value" not in compiled.groupindex:
            raise ValueError("note pattern needs a named group 'value'")
        return value

    def match(self, text: str) -> Optional[str]:
        found = re.search(self.pattern, text)
        return found.group("value") if found else None


class OraclePlan(BaseModel):
    strategy: ScanMode = ScanMode.LINEAR_SCAN
    target_keys: List[str] = Field(default_factory=list)
    note_schedule: List[NoteRule] = Field(default_factory=list)
    chunk_size: int = Field(4096, ge=512, le=12000)
    top_k: int = Field(5, ge=1, le=50)
    # key whose note becomes the final answer; defaults to the first rule
    answer_key: Optional[str] = None
    # only chunks ending inside the first N tokens are read
    truncate_tokens: Optional[int] = Field(None, gt=0)
    check_budget_every: Optional[int] = Field(None, ge=1)

    def validate_for(self, tool_set: ToolSet) -> None:
        if self.strategy == ScanMode.KEYWORD_SEARCH:
            if not tool_set.is_enabled(ToolName.SEARCH_ENGINE):
                raise PlanError("keyword_search plan requires searchEngine to be enabled")
            if not self.target_keys:
                raise PlanError("keyword_search plan needs at least one target key")
        for name in (ToolName.BUILD_INDEX, ToolName.READ_CHUNK, ToolName.DELETE_CONTEXT):
            if not tool_set.is_enabled(name):
                raise PlanError(f"oracle plan requires {name.value}")
        if self.note_schedule and not tool_set.is_enabled(ToolName.NOTE):
            raise PlanError("note schedule requires the note tool")

    @property
    def resolved_answer_key(self) -> Optional[str]:
        if self.answer_key:
            return self.answer_key
        return self.note_schedule[0].key if self.note_schedule else None


class SamplingParams(BaseModel):
    temperature: float = Field(0.7, ge=0, le=2)
    top_p: float = Field(0.8, gt=0, le=1)
    top_k: int = Field(20, ge=-1)
    max_tokens: Optional[int] = Field(None, gt=0)
    # forwarded untouched, e.g. server-specific thinking toggles
    extra: Dict[str, Any] = Field(default_factory=dict)


class RemoteEndpoint(BaseModel):
    base_url: str
    model_name: str
    auth_token: SecretStr = SecretStr("")
    sampling: SamplingParams = Field(default_factory=SamplingParams)
    timeout: float = Field(120.0, gt=0)
    max_attempts: int = Field(3, ge=1)
    backoff_base: float = Field(1.0, ge=0)
    max_concurrency: int = Field(8, ge=1)

    @property
    def completions_url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"


class PolicyDecision(BaseModel):
    thought: str = ""
    tool_name: Optional[str] = None
    arguments: Dict[str, Any] = Field(default_factory=dict)
    call_id: Optional[str] = None
    declared_mode: Optional[ScanMode] = None
    error: Optional[str] = None


class PolicyView(BaseModel):
    """What a policy sees at round t: the serialized state plus its structured form."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    serialized: str
    system_prompt: str
    messages: List[Message]
    tools: List[Dict[str, Any]]
    round: int
    visible_tokens: int
    token_budget: int
    rounds_budget: int
