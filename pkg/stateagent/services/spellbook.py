import json
import logging
import math
from typing import Any, Dict, List, Optional

from ..errors import (
    DuplicateKey,
    EmptyCorpus,
    EpisodeClosed,
    IndexAlreadyBuilt,
    NoIndex,
    StateAgentError,
    ToolDisabled,
    UnknownKey,
)
from ..models.context import InteractionState, Role
from ..models.tools import (
    TOOL_ARGS,
    TOOL_DESCRIPTIONS,
    DeleteMode,
    Notebook,
    NoteEntry,
    Observation,
    ObservationStatus,
    ToolCall,
    ToolName,
    ToolSet,
)
from ..models.trajectory import EpisodeConfig
from ..utils.validators import ToolArgumentValidator
from .context import check_deletable, visible_tokens
from .corpus_index import ChunkIndex, IndexCache

logger = logging.getLogger(__name__)


def tool_manifest(tool_set: ToolSet) -> List[Dict[str, Any]]:
    """Machine-readable tool specification in chat-completions function format."""
    manifest = []
    for name in tool_set.enabled:
        schema = TOOL_ARGS[name].model_json_schema()
        schema.pop("title", None)
        for prop in schema.get("properties", {}).values():
            prop.pop("title", None)
        manifest.append(
            {
                "type": "function",
                "function": {
                    "name": name.value,
                    "description": TOOL_DESCRIPTIONS[name],
                    "parameters": schema,
                },
            }
        )
    return manifest


def manifest_lines(tool_set: ToolSet) -> List[str]:
    """One compact JSON line per tool, as rendered into the system block."""
    return [json.dumps(tool["function"], sort_keys=True, ensure_ascii=False) for tool in tool_manifest(tool_set)]


def _header(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, ensure_ascii=False)


class Spellbook:
    """Environment side of the ten tools for one episode.

    ``execute`` runs before the round is appended to the state, so the invoking
    assistant message will receive ``state.next_msg_id`` and the observation
    ``state.next_msg_id + 1``. Tool failures come back as error observations;
    only a call after ``finish`` raises.
    """

    def __init__(self, corpus: str, config: EpisodeConfig, index_cache: Optional[IndexCache] = None):
        self.corpus = corpus
        self.config = config
        self.tool_set = config.tool_set
        self.counter = config.counter
        self.notebook = Notebook()
        self.index: Optional[ChunkIndex] = None
        self.index_cache = index_cache
        self.closed = False
        self._manifest_lines = manifest_lines(self.tool_set)

        self._handlers = {
            ToolName.ANALYZE_TEXT: self._analyze_text,
            ToolName.CHECK_BUDGET: self._check_budget,
            ToolName.BUILD_INDEX: self._build_index,
            ToolName.SEARCH_ENGINE: self._search_engine,
            ToolName.READ_CHUNK: self._read_chunk,
            ToolName.NOTE: self._note,
            ToolName.UPDATE_NOTE: self._update_note,
            ToolName.READ_NOTE: self._read_note,
            ToolName.DELETE_CONTEXT: self._delete_context,
            ToolName.FINISH: self._finish,
        }

    @property
    def manifest(self) -> List[Dict[str, Any]]:
        return tool_manifest(self.tool_set)

    @property
    def rendered_manifest(self) -> List[str]:
        return self._manifest_lines

    def execute(self, call: ToolCall, state: InteractionState) -> Observation:
        if self.closed:
            raise EpisodeClosed("episode already finished")
        produced = state.next_msg_id + 1
        try:
            if not self.tool_set.is_enabled(call.name):
                raise ToolDisabled(f"{call.name.value} is not enabled in this episode")
            args = ToolArgumentValidator.validate(call.name, call.args)
            return self._handlers[call.name](call, args, state)
        except StateAgentError as exc:
            logger.debug("tool %s failed: %s", call.name.value, exc.code)
            return Observation(
                call_id=call.call_id,
                status=ObservationStatus.ERROR,
                content=_header({"status": "error", "tool": call.name.value, "code": exc.code, "message": exc.message}),
                produced_msg_id=produced,
                error_code=exc.code,
            )

    # perception

    def _analyze_text(self, call, args, state) -> Observation:
        tokens = self.counter.count(self.corpus)
        chunk_size = self.index.chunk_size if self.index else self.config.default_chunk_size
        if tokens == 0:
            size_class = "empty"
        elif tokens <= self.config.short_text_tokens:
            size_class = "short"
        else:
            size_class = "long"
        data = {
            "tokens": tokens,
            "chunk_size": chunk_size,
            "chunk_estimate": math.ceil(tokens / chunk_size),
            "size_class": size_class,
            "indexed": self.index is not None,
        }
        return self._ok(call, state, data)

    def _check_budget(self, call, args, state) -> Observation:
        used = visible_tokens(state, self.counter, self.config.system_prompt, self._manifest_lines)
        rounds_used = state.round + 1
        data = {
            "tokens_used": used,
            "token_budget": state.token_budget,
            "tokens_remaining": max(0, state.token_budget - used),
            "rounds_used": rounds_used,
            "rounds_budget": state.rounds_budget,
            "rounds_remaining": max(0, state.rounds_budget - rounds_used),
        }
        return self._ok(call, state, data)

    # acquisition

    def _build_index(self, call, args, state) -> Observation:
        if not self.corpus:
            raise EmptyCorpus("no text is attached to this episode")
        if self.index is not None and not args.rebuild:
            raise IndexAlreadyBuilt("index exists; pass rebuild=true to replace it")
        if self.index_cache is not None:
            self.index = self.index_cache.get(self.corpus, args.chunk_size, self.counter)
        else:
            self.index = ChunkIndex.build(self.corpus, args.chunk_size, self.counter)
        data = {
            "chunk_size": args.chunk_size,
            "num_chunks": self.index.num_chunks,
            "chunk_ids": [0, self.index.num_chunks - 1],
        }
        return self._ok(call, state, data)

    def _search_engine(self, call, args, state) -> Observation:
        index = self._require_index()
        hits = index.search(args.query, args.top_k, self.config.snippet_tokens)
        data = {"query": args.query, "hits": [{"chunk_id": hit.chunk_id, "score": round(hit.score, 6)} for hit in hits]}
        body = "\n".join(f"--- chunk {hit.chunk_id}\n{hit.snippet}" for hit in hits)
        return self._ok(call, state, data, body=body)

    def _read_chunk(self, call, args, state) -> Observation:
        index = self._require_index()
        text = index.text(args.chunk_id)
        produced = state.next_msg_id + 1
        data = {
            "chunk_id": args.chunk_id,
            "msg_id": produced,
            "tokens": index.chunks[args.chunk_id].token_count,
        }
        return self._ok(call, state, data, body=text, referenced=[produced])

    # memory

    def _note(self, call, args, state) -> Observation:
        if args.key in self.notebook:
            raise DuplicateKey(f"note {args.key!r} exists; use updateNote")
        current = state.round + 1
        self.notebook.entries[args.key] = NoteEntry(text=args.text, created_round=current, updated_round=current)
        invoking = state.next_msg_id
        data = {"key": args.key, "msg_id(invoking_assistant)": invoking}
        return self._ok(call, state, data, referenced=[invoking])

    def _update_note(self, call, args, state) -> Observation:
        entry = self.notebook.entries.get(args.key)
        if entry is None:
            raise UnknownKey(f"no note with key {args.key!r}")
        entry.text = args.text
        entry.updated_round = state.round + 1
        invoking = state.next_msg_id
        data = {"key": args.key, "msg_id(invoking_assistant)": invoking}
        return self._ok(call, state, data, referenced=[invoking])

    def _read_note(self, call, args, state) -> Observation:
        if args.key in (None, "*"):
            keys = list(self.notebook.entries)
        elif args.key in self.notebook:
            keys = [args.key]
        else:
            raise UnknownKey(f"no note with key {args.key!r}")
        body = "\n".join(f"[{key}] {self.notebook.entries[key].text}" for key in keys)
        return self._ok(call, state, {"keys": keys}, body=body)

    def _delete_context(self, call, args, state) -> Observation:
        deleted: List[int] = []
        failed: Dict[str, str] = {}
        deletions = []
        for msg_id in args.msg_ids:
            target = state.get(msg_id)
            mode = self.tool_set.deletion_mode
            if (
                mode == DeleteMode.TOOLCALLS_ONLY
                and target is not None
                and not (target.role == Role.ASSISTANT and target.tool_calls)
            ):
                # nothing to prune but the whole message
                mode = DeleteMode.FULL
            try:
                check_deletable(state, msg_id, mode)
            except StateAgentError as exc:
                failed[str(msg_id)] = exc.code
                continue
            deleted.append(msg_id)
            deletions.append({"msg_id": msg_id, "mode": mode.value})

        produced = state.next_msg_id + 1
        content = _header({"status": "ok", "deleted": deleted, "failed": failed})
        return Observation(
            call_id=call.call_id,
            content=content,
            produced_msg_id=produced,
            referenced_msg_ids=deleted,
            data={"tool": call.name.value, "deleted": deleted, "failed": failed, "deletions": deletions},
        )

    # termination

    def _finish(self, call, args, state) -> Observation:
        self.closed = True
        return Observation(
            call_id=call.call_id,
            content=_header({"status": "ok", "tool": call.name.value, "answer": args.answer}),
            data={"tool": call.name.value, "answer": args.answer},
        )

    def _require_index(self) -> ChunkIndex:
        if self.index is None:
            raise NoIndex("call buildIndex first")
        return self.index

    def _ok(
        self,
        call: ToolCall,
        state: InteractionState,
        data: Dict[str, Any],
        body: Optional[str] = None,
        referenced: Optional[List[int]] = None,
    ) -> Observation:
        header = _header({"status": "ok", "tool": call.name.value, **data})
        content = header if body is None else f"{header}\n{body}"
        return Observation(
            call_id=call.call_id,
            content=content,
            produced_msg_id=state.next_msg_id + 1,
            referenced_msg_ids=referenced or [],
            data={"tool": call.name.value, **data},
        )
