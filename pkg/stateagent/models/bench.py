import re
from typing import List, Optional

from pydantic import BaseModel, Field, field_validator

STANDARD_LENGTHS: List[int] = [
    32_000, 64_000, 128_000, 256_000, 512_000, 768_000, 1_000_000, 2_000_000,
]

_LENGTH_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([kKmM]?)\s*$")


def parse_length(text: str) -> int:
    """'256K' -> 256000, '1M' -> 1000000, '4096' -> 4096 (decimal multipliers)."""
    match = _LENGTH_RE.match(str(text))
    if not match:
        raise ValueError(f"invalid context length: {text!r}")
    value, unit = match.groups()
    multiplier = {"": 1, "k": 1_000, "m": 1_000_000}[unit.lower()]
    return int(round(float(value) * multiplier))


def format_length(tokens: int) -> str:
    if tokens >= 1_000_000 and tokens % 1_000_000 == 0:
        return f"{tokens // 1_000_000}M"
    if tokens >= 1_000 and tokens % 1_000 == 0:
        return f"{tokens // 1_000}K"
    return str(tokens)


def parse_lengths(text: str) -> List[int]:
    """Comma list ('32K,64K') or a range over the standard lengths ('32K..2M')."""
    if ".." in text:
        low, high = (parse_length(part) for part in text.split("..", 1))
        lengths = [length for length in STANDARD_LENGTHS if low <= length <= high]
        if not lengths:
            raise ValueError(f"no standard lengths in range {text!r}")
        return lengths
    return [parse_length(part) for part in text.split(",") if part.strip()]


class NiahInstance(BaseModel):
    instance_id: str
    haystack: str
    needle_key: str
    needle_value: str
    insertion_position: float = Field(ge=0, le=1)
    query: str
    target_length: int = Field(gt=0)
    token_count: int = 0
    seed: int = 0

    @property
    def label(self) -> str:
        return format_length(self.target_length)

    @property
    def needle(self) -> str:
        return f"The special magic number for {self.needle_key} is {self.needle_value}."


class BenchGrid(BaseModel):
    lengths: List[int] = Field(default_factory=lambda: list(STANDARD_LENGTHS))
    instances_per_cell: int = Field(60, ge=1)
    seed: int = 0
    repeats: int = Field(1, ge=1)

    @field_validator("lengths")
    @classmethod
    def _check_lengths(cls, value: List[int]) -> List[int]:
        if not value or any(length <= 0 for length in value):
            raise ValueError("lengths must be positive and non-empty")
        return value

    @property
    def total(self) -> int:
        return len(self.lengths) * self.instances_per_cell


class NiahManifest(BaseModel):
    grid: BenchGrid
    instance_files: List[str] = Field(default_factory=list)
    counter_scheme: str = "whitespace"
    version: Optional[str] = None


class GridRecord(BaseModel):
    """One graded episode of a grid run."""

    policy: str
    instance_id: str
    target_length: int
    position: float
    repeat: int = 0
    correct: bool
    status: str
    rounds: int
    peak_tokens: int
    transport_error: Optional[str] = None
