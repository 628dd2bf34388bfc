import hashlib
import logging
import math
import re
from collections import Counter
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import EmptyCorpus, NoIndex, UnknownChunk
from ..models.context import TokenCounter
from ..models.corpus import Chunk, IndexSidecar, SearchHit

logger = logging.getLogger(__name__)

MIN_CHUNK_SIZE = 512
MAX_CHUNK_SIZE = 12000
SIDECAR_VERSION = 1

_TERM_RE = re.compile(r"[^\W_]+")
_PARAGRAPH_RE = re.compile(r"(\n\s*\n)")
_SENTENCE_RE = re.compile(r"(?<=[.!?])(\s+)")
_WHITESPACE_RE = re.compile(r"(\s+)")


def tokenize(text: str) -> List[str]:
    """Lowercase and split on non-alphanumerics; no stemming, no stopwords."""
    return _TERM_RE.findall(text.lower())


def corpus_hash(corpus: str) -> str:
    return hashlib.sha256(corpus.encode("utf-8")).hexdigest()


def _split_keep(text: str, pattern: re.Pattern) -> List[str]:
    # separators stay attached to the preceding piece so pieces concatenate back to text
    parts = pattern.split(text)
    pieces = []
    for i in range(0, len(parts), 2):
        piece = parts[i] + (parts[i + 1] if i + 1 < len(parts) else "")
        if piece:
            pieces.append(piece)
    return pieces


_LEVELS: Tuple[re.Pattern, ...] = (_PARAGRAPH_RE, _SENTENCE_RE, _WHITESPACE_RE)


class CorpusChunker:
    """Greedy paragraph-first chunker.

    Pieces are accumulated while the sum of their token counts fits the chunk
    size. Oversized pieces are re-split at sentence, then whitespace, then
    character level. Summing piece counts is an upper bound for the built-in
    counting schemes; an external counter is re-checked on the assembled chunk.
    """

    def __init__(self, chunk_size: int, counter: TokenCounter):
        if not MIN_CHUNK_SIZE <= chunk_size <= MAX_CHUNK_SIZE:
            raise ValueError(f"chunk_size must be in [{MIN_CHUNK_SIZE}, {MAX_CHUNK_SIZE}], got {chunk_size}")
        self.chunk_size = chunk_size
        self.counter = counter

    def chunk(self, corpus: str) -> List[Chunk]:
        if not corpus:
            raise EmptyCorpus("cannot chunk an empty corpus")

        spans: List[Tuple[int, int]] = []
        start = 0
        cursor = 0
        running = 0
        for piece, tokens in self._pieces(corpus, level=0):
            if running and running + tokens > self.chunk_size:
                spans.append((start, cursor))
                start, running = cursor, 0
            running += tokens
            cursor += len(piece)
        if cursor > start:
            spans.append((start, cursor))

        chunks: List[Chunk] = []
        for span_start, span_end in spans:
            for sub_start, sub_end in self._verify(corpus, span_start, span_end):
                text = corpus[sub_start:sub_end]
                chunks.append(
                    Chunk(
                        chunk_id=len(chunks),
                        start_offset=sub_start,
                        end_offset=sub_end,
                        token_count=self.counter.count(text),
                    )
                )
        return chunks

    def _pieces(self, text: str, level: int):
        if level >= len(_LEVELS):
            for piece in self._hard_split(text):
                yield piece, self.counter.count(piece)
            return
        for piece in _split_keep(text, _LEVELS[level]):
            tokens = self.counter.count(piece)
            if tokens <= self.chunk_size:
                yield piece, tokens
            else:
                yield from self._pieces(piece, level + 1)

    def _hard_split(self, text: str) -> List[str]:
        pieces = []
        while text:
            # largest prefix that fits, by binary search over character length
            low, high = 1, len(text)
            while low < high:
                mid = (low + high + 1) // 2
                if self.counter.count(text[:mid]) <= self.chunk_size:
                    low = mid
                else:
                    high = mid - 1
            pieces.append(text[:low])
            text = text[low:]
        return pieces

    def _verify(self, corpus: str, start: int, end: int) -> List[Tuple[int, int]]:
        if self.counter.count(corpus[start:end]) <= self.chunk_size:
            return [(start, end)]
        logger.debug("chunk [%d, %d) over budget under counter, splitting by characters", start, end)
        spans = []
        cursor = start
        for piece in self._hard_split(corpus[start:end]):
            spans.append((cursor, cursor + len(piece)))
            cursor += len(piece)
        return spans


def chunk_corpus(corpus: str, chunk_size: int, counter: TokenCounter) -> List[Chunk]:
    return CorpusChunker(chunk_size, counter).chunk(corpus)


class ChunkIndex:
    """Chunked corpus plus an inverted index serving Okapi BM25."""

    def __init__(
        self,
        corpus: str,
        chunks: List[Chunk],
        chunk_size: int,
        counter: TokenCounter,
        k1: float = 1.2,
        b: float = 0.75,
    ):
        if not chunks:
            raise EmptyCorpus("index needs at least one chunk")
        self.corpus = corpus
        self.chunks = chunks
        self.chunk_size = chunk_size
        self.counter = counter
        self.k1 = k1
        self.b = b
        self.corpus_sha256 = corpus_hash(corpus)

        self.postings: Dict[str, List[Tuple[int, int]]] = {}
        self.term_freqs: List[Counter] = []
        lengths = []
        for chunk in chunks:
            freqs = Counter(tokenize(self.text(chunk.chunk_id)))
            self.term_freqs.append(freqs)
            lengths.append(sum(freqs.values()))
            for term, tf in freqs.items():
                self.postings.setdefault(term, []).append((chunk.chunk_id, tf))

        self.doc_lengths = np.asarray(lengths, dtype=np.float64)
        self.avgdl = float(self.doc_lengths.mean()) if len(lengths) else 0.0
        # avoid dividing by zero for corpora without any alphanumeric term
        if self.avgdl == 0.0:
            self.avgdl = 1.0

        self._posting_arrays: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        self._idf: Dict[str, float] = {}
        for term, plist in self.postings.items():
            n = len(plist)
            self._idf[term] = math.log(1 + (self.num_chunks - n + 0.5) / (n + 0.5))

    @classmethod
    def build(
        cls, corpus: str, chunk_size: int, counter: TokenCounter, k1: float = 1.2, b: float = 0.75
    ) -> "ChunkIndex":
        chunks = chunk_corpus(corpus, chunk_size, counter)
        logger.debug("built index: %d chunks of <= %d tokens", len(chunks), chunk_size)
        return cls(corpus, chunks, chunk_size, counter, k1=k1, b=b)

    @property
    def num_chunks(self) -> int:
        return len(self.chunks)

    def text(self, chunk_id: int) -> str:
        if not 0 <= chunk_id < len(self.chunks):
            raise UnknownChunk(f"chunk_id {chunk_id} outside [0, {len(self.chunks) - 1}]")
        chunk = self.chunks[chunk_id]
        return self.corpus[chunk.start_offset:chunk.end_offset]

    def idf(self, term: str) -> float:
        return self._idf.get(term, 0.0)

    def document_frequency(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def bm25_score(self, query_terms: Sequence[str], chunk_id: int) -> float:
        if not 0 <= chunk_id < len(self.chunks):
            raise UnknownChunk(f"chunk_id {chunk_id} outside [0, {len(self.chunks) - 1}]")
        k1, b = self.k1, self.b
        dl = float(self.doc_lengths[chunk_id])
        freqs = self.term_freqs[chunk_id]
        score = 0.0
        for term in query_terms:
            tf = freqs.get(term, 0)
            if not tf:
                continue
            num = float(tf) * (k1 + 1.0)
            den = float(tf) + k1 * (1.0 - b + b * dl / self.avgdl)
            score += self._idf[term] * num / den
        return score

    def scores(self, query_terms: Sequence[str]) -> np.ndarray:
        # same operation order as bm25_score, so both paths agree bit for bit
        k1, b = self.k1, self.b
        scores = np.zeros(self.num_chunks, dtype=np.float64)
        for term in query_terms:
            if term not in self.postings:
                continue
            ids, tfs = self._arrays(term)
            dl = self.doc_lengths[ids]
            num = tfs * (k1 + 1.0)
            den = tfs + k1 * (1.0 - b + b * dl / self.avgdl)
            scores[ids] = scores[ids] + self._idf[term] * num / den
        return scores

    def top_k(self, query: str, k: int) -> List[Tuple[int, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        scores = self.scores(tokenize(query))
        ids = np.arange(self.num_chunks)
        # descending score, ascending chunk id among ties
        order = np.lexsort((ids, -scores))[:k]
        return [(int(i), float(scores[i])) for i in order]

    def search(self, query: str, top_k: int, snippet_tokens: int = 200) -> List[SearchHit]:
        terms = tokenize(query)
        hits = []
        for chunk_id, score in self.top_k(query, top_k):
            if score <= 0.0:
                continue
            hits.append(SearchHit(chunk_id=chunk_id, score=score, snippet=self.snippet(chunk_id, terms, snippet_tokens)))
        return hits

    def snippet(self, chunk_id: int, terms: Sequence[str], max_tokens: int) -> str:
        words = self.text(chunk_id).split()
        wanted = set(terms)
        first = next((i for i, word in enumerate(words) if wanted.intersection(tokenize(word))), 0)
        start = max(0, first - max_tokens // 4)
        return self.counter.truncate(" ".join(words[start:start + max_tokens]), max_tokens)

    def _arrays(self, term: str) -> Tuple[np.ndarray, np.ndarray]:
        cached = self._posting_arrays.get(term)
        if cached is None:
            plist = self.postings[term]
            cached = (
                np.fromiter((cid for cid, _ in plist), dtype=np.int64, count=len(plist)),
                np.fromiter((tf for _, tf in plist), dtype=np.float64, count=len(plist)),
            )
            self._posting_arrays[term] = cached
        return cached

    def to_sidecar(self) -> IndexSidecar:
        return IndexSidecar(
            version=SIDECAR_VERSION,
            corpus_sha256=self.corpus_sha256,
            chunk_size=self.chunk_size,
            counter_scheme=self.counter.scheme.value,
            k1=self.k1,
            b=self.b,
            chunks=self.chunks,
        )


class IndexCache:
    """Content-hash keyed store of built indexes, shared read-only across episodes."""

    def __init__(self, directory: Optional[Path] = None, builder: Optional[Callable[..., ChunkIndex]] = None):
        self.directory = Path(directory) if directory else None
        self._builder = builder or ChunkIndex.build
        self._indexes: Dict[Tuple[str, int, str, float, float], ChunkIndex] = {}
        self.hits = 0
        self.misses = 0

    def get(self, corpus: str, chunk_size: int, counter: TokenCounter, k1: float = 1.2, b: float = 0.75) -> ChunkIndex:
        digest = corpus_hash(corpus)
        key = (digest, chunk_size, counter.scheme.value, k1, b)
        index = self._indexes.get(key)
        if index is not None:
            self.hits += 1
            return index

        self.misses += 1
        index = self._load(corpus, digest, chunk_size, counter, k1, b)
        if index is None:
            index = self._builder(corpus, chunk_size, counter, k1=k1, b=b)
            self._store(index)
        self._indexes[key] = index
        return index

    def _path(self, digest: str, chunk_size: int, scheme: str) -> Optional[Path]:
        if self.directory is None:
            return None
        return self.directory / f"{digest}.{chunk_size}.{scheme}.json"

    def _load(self, corpus, digest, chunk_size, counter, k1, b) -> Optional[ChunkIndex]:
        path = self._path(digest, chunk_size, counter.scheme.value)
        if path is None or not path.exists():
            return None
        try:
            sidecar = IndexSidecar.model_validate_json(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            logger.warning("ignoring unreadable index sidecar %s: %s", path, exc)
            return None
        if sidecar.version != SIDECAR_VERSION or sidecar.corpus_sha256 != digest or (sidecar.k1, sidecar.b) != (k1, b):
            logger.info("index sidecar %s is stale, rebuilding", path)
            return None
        return ChunkIndex(corpus, sidecar.chunks, chunk_size, counter, k1=k1, b=b)

    def _store(self, index: ChunkIndex) -> None:
        path = self._path(index.corpus_sha256, index.chunk_size, index.counter.scheme.value)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(index.to_sidecar().model_dump_json(), encoding="utf-8")
