import json
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .context import CountingScheme
from .tools import DeleteMode


class RunSettings(BaseModel):
    """Config-file key set; CLI flags override these, these override defaults."""

    model_config = ConfigDict(extra="forbid")

    # episode
    token_budget: int = Field(32000, gt=0)
    rounds_budget: int = Field(150, gt=0)
    max_rounds: int = Field(200, gt=0)
    no_search: bool = False
    delete_mode: DeleteMode = DeleteMode.FULL
    prompt: str = "compact"
    counter: CountingScheme = CountingScheme.WHITESPACE
    chunk_size: int = Field(4096, ge=512, le=12000)
    search_top_k: int = Field(5, ge=1, le=50)
    snippet_tokens: int = Field(200, ge=1)
    record_snapshots: bool = True

    # remote endpoint
    endpoint: Optional[str] = None
    model: Optional[str] = None
    api_key_env: str = "STATEAGENT_API_KEY"
    temperature: float = Field(0.7, ge=0, le=2)
    top_p: float = Field(0.8, gt=0, le=1)
    top_k: int = Field(20, ge=-1)
    max_tokens: Optional[int] = Field(None, gt=0)
    extra_params: Dict[str, Any] = Field(default_factory=dict)
    timeout: float = Field(120.0, gt=0)
    max_concurrency: int = Field(8, ge=1)

    # orchestration
    jobs: int = Field(4, ge=1)
    seed: int = 0
    index_cache_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check_rounds(self) -> "RunSettings":
        if self.max_rounds < self.rounds_budget:
            raise ValueError("max_rounds must be >= rounds_budget")
        return self

    @classmethod
    def resolve(cls, config_path: Optional[Path], overrides: Dict[str, Any]) -> "RunSettings":
        """defaults < JSON config file < explicit overrides (None values are ignored)."""
        values: Dict[str, Any] = {}
        if config_path is not None:
            values.update(json.loads(Path(config_path).read_text(encoding="utf-8")))
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls.model_validate(values)
