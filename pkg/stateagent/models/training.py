from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from .trajectory import Snapshot


class Correctness(str, Enum):
    CORRECT = "correct"
    INCORRECT = "incorrect"
    NOT_APPLICABLE = "n/a"


class TrainingSample(BaseModel):
    sample_id: str
    source_trajectory_id: str
    step_index: int
    primary_action: str
    input_context: str
    target: str
    # byte ranges over input_context + target; only the target is masked in
    loss_mask: List[Tuple[int, int]] = Field(default_factory=list)
    tag: str = "default"

    @property
    def text(self) -> str:
        return self.input_context + self.target


class ProcessRules(BaseModel):
    prune_window: int = Field(2, ge=1)
    require_full_scan: bool = True


class FilterReport(BaseModel):
    source: str = "default"
    questions: int = 0
    total: int = 0
    outcome_pass: int = 0
    process_pass: int = 0
    samples_before_balance: int = 0
    samples_after_balance: int = 0

    @model_validator(mode="after")
    def _check_funnel(self) -> "FilterReport":
        if not self.total >= self.outcome_pass >= self.process_pass:
            raise ValueError("filter counts must be non-increasing across stages")
        if self.samples_after_balance > self.samples_before_balance:
            raise ValueError("balancing cannot add samples")
        return self


class BalanceReport(BaseModel):
    before: Dict[str, int] = Field(default_factory=dict)
    after: Dict[str, int] = Field(default_factory=dict)
    caps: Dict[str, float] = Field(default_factory=dict)


class RewardRecord(BaseModel):
    trajectory_id: str
    reward: float
    correctness: Correctness
    formatted: bool
    finished: bool

    @model_validator(mode="after")
    def _check_reward(self) -> "RewardRecord":
        if self.reward not in (1.0, -0.5, -1.0):
            raise ValueError(f"reward must be one of +1, -0.5, -1, got {self.reward}")
        return self


class RLSample(BaseModel):
    trajectory_id: str
    snapshot: Snapshot
    reward: float
    advantage: float
    group_id: Optional[str] = None
