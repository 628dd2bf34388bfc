from abc import ABC, abstractmethod
from typing import Iterable, List, Optional

from ..errors import TransportError
from ..models.policy import PolicyDecision, PolicyView
from ..models.tools import ToolName


class Policy(ABC):
    """Produces exactly one decision (thought plus at most one tool call) per round."""

    name: str = "policy"

    @abstractmethod
    async def step(self, view: PolicyView) -> PolicyDecision:
        ...


class ReplayPolicy(Policy):
    """Re-emits recorded decisions in order; used to re-execute a trajectory."""

    name = "replay"

    def __init__(self, decisions: Iterable[PolicyDecision], end_error: Optional[str] = None):
        self._decisions: List[PolicyDecision] = list(decisions)
        self._cursor = 0
        self._end_error = end_error

    async def step(self, view: PolicyView) -> PolicyDecision:
        if self._cursor >= len(self._decisions):
            if self._end_error is not None:
                raise TransportError(self._end_error)
            # recording ran out before the episode closed
            return PolicyDecision(thought="", tool_name=ToolName.FINISH.value, arguments={}, call_id="replay_end")
        decision = self._decisions[self._cursor]
        self._cursor += 1
        return decision.model_copy(deep=True)
