from enum import Enum
from typing import Any, Dict, List, Optional, Type

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ToolName(str, Enum):
    ANALYZE_TEXT = "analyzeText"
    CHECK_BUDGET = "checkBudget"
    BUILD_INDEX = "buildIndex"
    SEARCH_ENGINE = "searchEngine"
    READ_CHUNK = "readChunk"
    NOTE = "note"
    UPDATE_NOTE = "updateNote"
    READ_NOTE = "readNote"
    DELETE_CONTEXT = "deleteContext"
    FINISH = "finish"


class DeleteMode(str, Enum):
    FULL = "full"
    TOOLCALLS_ONLY = "toolcalls_only"


MEMORY_TOOLS = (ToolName.NOTE, ToolName.UPDATE_NOTE, ToolName.READ_NOTE)


class ToolCall(BaseModel):
    name: ToolName
    args: Dict[str, Any] = Field(default_factory=dict)
    call_id: str


class ObservationStatus(str, Enum):
    OK = "ok"
    ERROR = "error"


class Observation(BaseModel):
    call_id: str
    status: ObservationStatus = ObservationStatus.OK
    content: str
    produced_msg_id: Optional[int] = None
    referenced_msg_ids: List[int] = Field(default_factory=list)
    # Structured copy of what ``content`` renders; never shown to the policy.
    data: Dict[str, Any] = Field(default_factory=dict)
    error_code: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == ObservationStatus.OK


class NoteEntry(BaseModel):
    text: str
    created_round: int
    updated_round: int


class Notebook(BaseModel):
    entries: Dict[str, NoteEntry] = Field(default_factory=dict)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def snapshot(self) -> Dict[str, str]:
        return {key: entry.text for key, entry in self.entries.items()}


class ToolSet(BaseModel):
    enabled: List[ToolName] = Field(default_factory=lambda: list(ToolName))
    deletion_mode: DeleteMode = DeleteMode.FULL

    @model_validator(mode="after")
    def _finish_always_enabled(self) -> "ToolSet":
        names = set(self.enabled) | {ToolName.FINISH}
        self.enabled = [name for name in ToolName if name in names]
        return self

    @classmethod
    def without_search(cls, deletion_mode: DeleteMode = DeleteMode.TOOLCALLS_ONLY) -> "ToolSet":
        return cls(
            enabled=[name for name in ToolName if name != ToolName.SEARCH_ENGINE],
            deletion_mode=deletion_mode,
        )

    def is_enabled(self, name: ToolName) -> bool:
        return name in self.enabled


# Argument schemas. The tool manifest sent to remote models is generated from these.

class _Args(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AnalyzeTextArgs(_Args):
    pass


class CheckBudgetArgs(_Args):
    pass


class BuildIndexArgs(_Args):
    chunk_size: int = Field(4096, ge=512, le=12000, description="Chunk size in tokens (512-12000).")
    rebuild: bool = Field(False, description="Replace an index that was already built.")


class SearchEngineArgs(_Args):
    query: str = Field(min_length=1, description="Keywords to search for.")
    top_k: int = Field(5, ge=1, le=50, description="Number of hits to return.")


class ReadChunkArgs(_Args):
    chunk_id: int = Field(description="Id of the chunk to load.")


class NoteArgs(_Args):
    key: str = Field(min_length=1, description="Unique note key.")
    text: str = Field(description="Fact to record.")


class UpdateNoteArgs(_Args):
    key: str = Field(min_length=1, description="Existing note key.")
    text: str = Field(description="Replacement text.")


class ReadNoteArgs(_Args):
    key: Optional[str] = Field(None, description="Note key; omit or use '*' for all notes.")


class DeleteContextArgs(_Args):
    msg_ids: List[int] = Field(description="Message ids to remove from the visible context.")


class FinishArgs(_Args):
    answer: str = Field("", description="Final answer.")


TOOL_ARGS: Dict[ToolName, Type[BaseModel]] = {
    ToolName.ANALYZE_TEXT: AnalyzeTextArgs,
    ToolName.CHECK_BUDGET: CheckBudgetArgs,
    ToolName.BUILD_INDEX: BuildIndexArgs,
    ToolName.SEARCH_ENGINE: SearchEngineArgs,
    ToolName.READ_CHUNK: ReadChunkArgs,
    ToolName.NOTE: NoteArgs,
    ToolName.UPDATE_NOTE: UpdateNoteArgs,
    ToolName.READ_NOTE: ReadNoteArgs,
    ToolName.DELETE_CONTEXT: DeleteContextArgs,
    ToolName.FINISH: FinishArgs,
}

TOOL_DESCRIPTIONS: Dict[ToolName, str] = {
    ToolName.ANALYZE_TEXT: "Estimates input scale: token count, chunk estimate and size class of the attached text.",
    ToolName.CHECK_BUDGET: "Reports remaining interaction budget (context tokens and rounds).",
    ToolName.BUILD_INDEX: "Builds a searchable index by splitting the attached text into chunks.",
    ToolName.SEARCH_ENGINE: "Searches for relevant segments with BM25 keyword retrieval.",
    ToolName.READ_CHUNK: "Loads a selected text chunk; the result reports its own msg_id for later deletion.",
    ToolName.NOTE: "Records a key fact in the persistent notebook under a new key.",
    ToolName.UPDATE_NOTE: "Replaces the text of an existing note.",
    ToolName.READ_NOTE: "Retrieves stored notes into the context.",
    ToolName.DELETE_CONTEXT: "Removes messages from the visible context by msg_id; notes are kept.",
    ToolName.FINISH: "Ends reasoning and outputs the answer.",
}
