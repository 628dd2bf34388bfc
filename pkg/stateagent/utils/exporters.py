import io
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Sequence

import pandas as pd

from ..models.bench import GridRecord
from ..models.training import RLSample, TrainingSample
from ..models.trajectory import Trajectory

logger = logging.getLogger(__name__)


class TableFormat(str, Enum):
    CSV = "csv"
    MARKDOWN = "markdown"
    JSON = "json"


class TableExporter:
    """Export report tables (funnel, tool usage, accuracy grid)"""

    SUFFIXES = {TableFormat.CSV: ".csv", TableFormat.MARKDOWN: ".md", TableFormat.JSON: ".json"}

    @staticmethod
    def render(table: pd.DataFrame, fmt: TableFormat = TableFormat.MARKDOWN) -> str:
        fmt = TableFormat(fmt)
        if fmt == TableFormat.CSV:
            return table.to_csv()
        if fmt == TableFormat.JSON:
            return table.reset_index().to_json(orient="records", indent=2)
        if table.empty:
            return "(empty)\n"
        return table.to_markdown() + "\n"

    @staticmethod
    def write(table: pd.DataFrame, path: Path, fmt: TableFormat = TableFormat.MARKDOWN) -> Path:
        path = Path(path)
        if not path.suffix:
            path = path.with_suffix(TableExporter.SUFFIXES[TableFormat(fmt)])
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(TableExporter.render(table, fmt), encoding="utf-8")
        return path


class TrajectoryStore:
    """One JSON file per trajectory, named by trajectory id"""

    @staticmethod
    def write(trajectory: Trajectory, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{trajectory.trajectory_id}.json"
        path.write_text(trajectory.model_dump_json(), encoding="utf-8")
        return path

    @staticmethod
    def read(path: Path) -> Trajectory:
        return Trajectory.model_validate_json(Path(path).read_text(encoding="utf-8"))

    @staticmethod
    def load_dir(directory: Path) -> List[Trajectory]:
        """All trajectory files of a directory, in file-name order; manifests and replay reports are skipped."""
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"no such directory: {directory}")
        trajectories = []
        for path in sorted(directory.glob("*.json")):
            if path.name in {"run_manifest.json", "manifest.json"} or path.name.startswith("replay_"):
                continue
            trajectories.append(TrajectoryStore.read(path))
        logger.info("loaded %d trajectories from %s", len(trajectories), directory)
        return trajectories


class SampleExporter:
    """JSON Lines export of training samples, one record per line"""

    @staticmethod
    def to_jsonl(samples: Iterable[TrainingSample]) -> str:
        output = io.StringIO()
        for sample in samples:
            record = sample.model_dump(mode="json")
            record["text"] = sample.text
            output.write(json.dumps(record, ensure_ascii=False))
            output.write("\n")
        return output.getvalue()

    @staticmethod
    def write_samples(samples: Sequence[TrainingSample], path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(SampleExporter.to_jsonl(samples), encoding="utf-8")
        return path

    @staticmethod
    def read_samples(path: Path) -> List[TrainingSample]:
        samples = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            record.pop("text", None)
            samples.append(TrainingSample.model_validate(record))
        return samples

    @staticmethod
    def write_rl_batch(batch: Sequence[RLSample], path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as handle:
            for sample in batch:
                handle.write(sample.model_dump_json())
                handle.write("\n")
        return path


class GridExporter:
    """Per-episode grid records as CSV, for re-aggregation"""

    @staticmethod
    def to_frame(records: Sequence[GridRecord]) -> pd.DataFrame:
        return pd.DataFrame([record.model_dump() for record in records], columns=list(GridRecord.model_fields))

    @staticmethod
    def write(records: Sequence[GridRecord], path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        GridExporter.to_frame(records).to_csv(path, index=False)
        return path
