from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List

from pydantic import BaseModel, Field

from .. import __version__

MANIFEST_NAME = "run_manifest.json"


class RunManifest(BaseModel):
    command: str
    argv: List[str] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    input_hashes: Dict[str, str] = Field(default_factory=dict)
    output_paths: List[str] = Field(default_factory=list)
    version: str = __version__
    created_at: datetime = Field(default_factory=datetime.now)

    def write(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_NAME
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def read(cls, directory: Path) -> "RunManifest":
        return cls.model_validate_json((Path(directory) / MANIFEST_NAME).read_text(encoding="utf-8"))
