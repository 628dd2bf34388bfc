import json
import logging
from typing import Iterable, List, Optional, Sequence

from ..errors import InvalidMode, ProtectedMessage, UnknownMsgId
from ..models.context import (
    STUB_TEMPLATE,
    InteractionState,
    Message,
    Role,
    StateEvent,
    TokenCounter,
    Visibility,
)
from ..models.tools import DeleteMode, ToolCall
from ..prompts import template_environment

logger = logging.getLogger(__name__)


def render_tool_call(call: ToolCall) -> str:
    return json.dumps(
        {"name": call.name.value, "arguments": call.args, "id": call.call_id},
        sort_keys=True,
        ensure_ascii=False,
    )


class ChatTemplate:
    """The chat templating function: one system block, then one block per message."""

    def __init__(self):
        env = template_environment()
        self._system = env.get_template("chat_system.j2")
        self._message = env.get_template("chat_message.j2")

    def render_system(self, system_prompt: str, tools: Optional[Sequence[str]] = None) -> str:
        return self._system.render(system_prompt=system_prompt, tools=list(tools or []))

    def render_message(self, message: Message) -> str:
        calls = [] if message.visibility == Visibility.TOOLCALLS_STUBBED else message.tool_calls
        return self._message.render(
            role=message.role.value,
            msg_id=message.msg_id,
            stubbed=message.visibility == Visibility.STUBBED,
            stub_text=message.stub_text,
            content=message.content,
            tool_calls=[render_tool_call(call) for call in calls],
        )


_template = ChatTemplate()


def render_block(state: InteractionState, message: Message) -> str:
    cached = state._blocks.get(message.msg_id)
    if cached is not None and cached[0] == message.visibility:
        return cached[1]
    block = _template.render_message(message)
    state._blocks[message.msg_id] = (message.visibility, block)
    return block


def append(state: InteractionState, msg: Message) -> InteractionState:
    if msg.msg_id is not None:
        raise ValueError(f"message already carries msg_id {msg.msg_id}")
    msg.msg_id = state.next_msg_id
    state.next_msg_id += 1
    state.messages.append(msg)
    if msg.role == Role.ASSISTANT:
        state.round += 1
    state.log.append(
        StateEvent(op="append", msg_id=msg.msg_id, payload=msg.model_dump(mode="json", exclude={"msg_id"}))
    )
    return state


def check_deletable(state: InteractionState, msg_id: int, mode: DeleteMode) -> DeleteMode:
    """Effective mode for deleting ``msg_id``; raises the typed error when it cannot be deleted."""
    target = state.get(msg_id)
    if target is None:
        raise UnknownMsgId(f"no message with msg_id {msg_id}")
    if target.role == Role.SYSTEM or msg_id == state.query_msg_id:
        raise ProtectedMessage(f"msg_id {msg_id} is the system prompt or the user query")
    if mode == DeleteMode.TOOLCALLS_ONLY and not (target.role == Role.ASSISTANT and target.tool_calls):
        raise InvalidMode(f"msg_id {msg_id} has no tool calls to prune")
    return mode


def delete_message(state: InteractionState, msg_id: int, mode: DeleteMode = DeleteMode.FULL) -> InteractionState:
    mode = DeleteMode(mode)
    check_deletable(state, msg_id, mode)
    target = state.messages[msg_id]

    if mode == DeleteMode.FULL:
        if target.visibility != Visibility.STUBBED:
            target.visibility = Visibility.STUBBED
            target.stub_text = STUB_TEMPLATE.format(id=msg_id)
    elif target.visibility == Visibility.VISIBLE:
        target.visibility = Visibility.TOOLCALLS_STUBBED

    state.log.append(StateEvent(op="delete", msg_id=msg_id, mode=mode))
    return state


def serialize(state: InteractionState, system_prompt: str, tools: Optional[Sequence[str]] = None) -> str:
    parts: List[str] = [_template.render_system(system_prompt, tools)]
    parts.extend(render_block(state, message) for message in state.messages)
    return "".join(parts)


def visible_tokens(
    state: InteractionState,
    counter: TokenCounter,
    system_prompt: str = "",
    tools: Optional[Sequence[str]] = None,
) -> int:
    # stubs are part of the rendering and are counted like any other text
    return counter.count(serialize(state, system_prompt, tools))


def replay_log(
    events: Iterable[StateEvent],
    query: str,
    token_budget: int = 32000,
    rounds_budget: int = 150,
    max_rounds: int = 200,
) -> InteractionState:
    """Rebuild a state from its event log, starting from the empty state."""
    state = InteractionState(
        query=query, token_budget=token_budget, rounds_budget=rounds_budget, max_rounds=max_rounds
    )
    for event in events:
        apply_event(state, event)
    return state


def apply_event(state: InteractionState, event: StateEvent) -> InteractionState:
    if event.op == "append":
        message = Message.model_validate(event.payload or {})
        append(state, message)
        if message.msg_id != event.msg_id:
            raise ValueError(f"log expected msg_id {event.msg_id}, replay produced {message.msg_id}")
        if message.role == Role.USER and state.query_msg_id is None:
            state.query_msg_id = message.msg_id
        return state
    return delete_message(state, event.msg_id, event.mode or DeleteMode.FULL)
