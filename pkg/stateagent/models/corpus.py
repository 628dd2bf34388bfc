from typing import List

from pydantic import BaseModel, Field


class Chunk(BaseModel):
    chunk_id: int = Field(ge=0)
    start_offset: int = Field(ge=0)
    end_offset: int = Field(ge=0)
    token_count: int = Field(ge=0)


class SearchHit(BaseModel):
    chunk_id: int
    score: float
    snippet: str = ""


class IndexSidecar(BaseModel):
    """On-disk form of a built index; postings are rebuilt from the chunk spans."""

    version: int = 1
    corpus_sha256: str
    chunk_size: int
    counter_scheme: str
    k1: float
    b: float
    chunks: List[Chunk]
