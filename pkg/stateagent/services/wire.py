import json
import re
from typing import Any, Dict, List, Optional, Tuple

from ..errors import InvalidArguments, MalformedResponse
from ..models.context import STUB_TEMPLATE, Message, Role, Visibility
from ..models.policy import PolicyDecision
from ..models.tools import ToolCall
from ..utils.validators import ToolArgumentValidator

_ID_PREFIX_RE = re.compile(r"^\[msg (\d+)\]\n", re.S)


def message_to_wire(message: Message, paired: bool = True) -> Dict[str, Any]:
    """Chat-completions form of one message; stubs keep their original position.

    A tool result whose call is no longer announced (its assistant turn was stubbed or had
    its calls removed) goes out as a user message so the request keeps call pairing.
    """
    if message.visibility == Visibility.STUBBED:
        body = message.stub_text or STUB_TEMPLATE.format(id=message.msg_id)
    else:
        body = message.content
    wire: Dict[str, Any] = {"role": message.role.value, "content": f"[msg {message.msg_id}]\n{body}"}
    if message.role == Role.ASSISTANT and message.tool_calls and message.visibility == Visibility.VISIBLE:
        wire["tool_calls"] = [
            {
                "id": call.call_id,
                "type": "function",
                "function": {"name": call.name.value, "arguments": json.dumps(call.args, ensure_ascii=False)},
            }
            for call in message.tool_calls
        ]
    if message.tool_call_id is not None:
        if paired:
            wire["tool_call_id"] = message.tool_call_id
        else:
            wire["role"] = Role.USER.value
    return wire


def to_wire(messages: List[Message], system_prompt: str) -> List[Dict[str, Any]]:
    wire = [{"role": "system", "content": system_prompt}]
    announced = set()
    for message in messages:
        item = message_to_wire(message, paired=message.tool_call_id in announced)
        announced.update(call["id"] for call in item.get("tool_calls", []))
        wire.append(item)
    return wire


def message_from_wire(wire: Dict[str, Any]) -> Message:
    content = wire.get("content") or ""
    match = _ID_PREFIX_RE.match(content)
    msg_id: Optional[int] = None
    if match:
        msg_id = int(match.group(1))
        content = content[match.end():]

    role = Role(wire["role"])
    message = Message(role=role, content=content, tool_call_id=wire.get("tool_call_id"))
    message.msg_id = msg_id
    if msg_id is not None and content == STUB_TEMPLATE.format(id=msg_id):
        message.content = ""
        message.visibility = Visibility.STUBBED
        message.stub_text = content

    for raw in wire.get("tool_calls") or []:
        function = raw.get("function") or {}
        name = ToolArgumentValidator.resolve_tool(function.get("name"))
        args = ToolArgumentValidator.parse_arguments(function.get("arguments"))
        message.tool_calls.append(ToolCall(name=name, args=args, call_id=raw.get("id", "")))
    return message


def from_wire(wire_messages: List[Dict[str, Any]]) -> Tuple[str, List[Message]]:
    """Inverse of ``to_wire``: (system prompt, messages)."""
    system_prompt = ""
    messages = []
    for wire in wire_messages:
        if wire.get("role") == "system" and not messages and not system_prompt:
            system_prompt = wire.get("content") or ""
            continue
        messages.append(message_from_wire(wire))
    return system_prompt, messages


def parse_completion(payload: Dict[str, Any]) -> PolicyDecision:
    """Turn a chat-completions response into one decision, or raise MalformedResponse."""
    try:
        message = payload["choices"][0]["message"]
    except (KeyError, IndexError, TypeError):
        raise MalformedResponse("response has no choices[0].message")
    if not isinstance(message, dict):
        raise MalformedResponse("choices[0].message is not an object")

    content = message.get("content")
    thought = content if isinstance(content, str) else ""
    calls = message.get("tool_calls") or []
    if not isinstance(calls, list):
        raise MalformedResponse("tool_calls is not a list", raw_text=thought)
    if not calls:
        raise MalformedResponse("the reply contained no tool call", raw_text=thought)
    if len(calls) > 1:
        raise MalformedResponse(f"expected one tool call, got {len(calls)}", raw_text=thought)
    if not isinstance(calls[0], dict):
        raise MalformedResponse("tool call is not an object", raw_text=thought)

    function = calls[0].get("function") or {}
    if not isinstance(function, dict):
        raise MalformedResponse("tool call function is not an object", raw_text=thought)
    name = function.get("name")
    if not name or not isinstance(name, str):
        raise MalformedResponse("tool call without a function name", raw_text=thought)
    try:
        arguments = ToolArgumentValidator.parse_arguments(function.get("arguments"))
    except InvalidArguments as exc:
        raise MalformedResponse(exc.message, raw_text=thought)
    call_id = calls[0].get("id")
    if not isinstance(call_id, str):
        call_id = None
    return PolicyDecision(thought=thought, tool_name=name, arguments=arguments, call_id=call_id)
