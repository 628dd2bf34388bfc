import logging
from typing import Dict, List, Optional, Sequence

import pandas as pd

from ..models.tools import MEMORY_TOOLS, ToolName
from ..models.trajectory import Trajectory

logger = logging.getLogger(__name__)

STATS_COLUMNS = ["Rounds", "mem", "del", "srh"]


def tool_usage(trajectory: Trajectory) -> Dict[str, int]:
    """Hand-countable tool-use pattern of one trajectory."""
    memory = {name.value for name in MEMORY_TOOLS}
    return {
        "Rounds": trajectory.rounds,
        "mem": sum(1 for event in trajectory.events if event.tool_name in memory),
        "del": len(trajectory.events_for(ToolName.DELETE_CONTEXT)),
        "srh": len(trajectory.events_for(ToolName.SEARCH_ENGINE)),
    }


def tool_usage_stats(trajectories: Sequence[Trajectory], tags: Optional[List[str]] = None) -> pd.DataFrame:
    """Mean rounds and memory / delete / search calls per benchmark tag.

    Tags listed in ``tags`` but absent from the trajectories get a row of zeros.
    """
    rows = [{"tag": trajectory.tag, **tool_usage(trajectory)} for trajectory in trajectories]
    frame = pd.DataFrame(rows, columns=["tag"] + STATS_COLUMNS)
    table = frame.groupby("tag")[STATS_COLUMNS].mean() if not frame.empty else pd.DataFrame(columns=STATS_COLUMNS)
    order = list(tags) if tags else sorted(table.index)
    table = table.reindex(order, fill_value=0.0).astype(float)
    table.index.name = "Benchmark"
    logger.debug("tool usage over %d trajectories and %d tags", len(trajectories), len(order))
    return table.round(2)
