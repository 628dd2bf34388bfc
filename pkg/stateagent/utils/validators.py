import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Optional
from urllib.parse import urlparse

import validators
from pydantic import BaseModel, ValidationError

from ..errors import InvalidArguments, UnknownTool
from ..models.tools import TOOL_ARGS, ToolName


class ToolArgumentValidator:
    """Validates tool-call arguments against the published schemas"""

    @staticmethod
    def resolve_tool(name: Any) -> ToolName:
        """Map a raw tool name onto a known tool"""
        try:
            return ToolName(name)
        except ValueError:
            raise UnknownTool(f"unknown tool {name!r}; available: {', '.join(t.value for t in ToolName)}")

    @staticmethod
    def validate(name: ToolName, args: Optional[Dict[str, Any]]) -> BaseModel:
        """Parse arguments into the tool's schema model"""
        if args is None:
            args = {}
        if not isinstance(args, dict):
            raise InvalidArguments(f"{name.value} arguments must be a JSON object")
        try:
            return TOOL_ARGS[name].model_validate(args)
        except ValidationError as exc:
            problems = "; ".join(
                f"{'.'.join(str(part) for part in error['loc']) or 'arguments'}: {error['msg']}"
                for error in exc.errors()
            )
            raise InvalidArguments(f"{name.value}: {problems}")

    @staticmethod
    def parse_arguments(raw: Any) -> Dict[str, Any]:
        """Arguments may arrive as a JSON string (wire format) or as a mapping"""
        if raw is None or raw == "":
            return {}
        if isinstance(raw, dict):
            return raw
        try:
            parsed = json.loads(raw)
        except (TypeError, ValueError) as exc:
            raise InvalidArguments(f"arguments are not valid JSON: {exc}")
        if not isinstance(parsed, dict):
            raise InvalidArguments("arguments must decode to a JSON object")
        return parsed


class InputValidator:
    """Validation helpers for command-line inputs"""

    @staticmethod
    def validate_endpoint_url(url: str) -> bool:
        """Validate an http(s) endpoint base URL"""
        if not url or not isinstance(url, str):
            return False
        # simple_host admits single-label hosts such as localhost
        if not validators.url(url, simple_host=True):
            return False
        return urlparse(url).scheme in ("http", "https")

    @staticmethod
    def validate_position(position: float) -> bool:
        return 0.0 <= position <= 1.0

    @staticmethod
    def validate_caps(caps: Dict[str, float]) -> List[str]:
        """Return a list of problems with an action-cap mapping"""
        problems = []
        for action, cap in caps.items():
            if action not in {name.value for name in ToolName}:
                problems.append(f"unknown action {action!r}")
            if not 0.0 < cap <= 1.0:
                problems.append(f"cap for {action} must be in (0, 1], got {cap}")
        return problems

    @staticmethod
    def read_text_file(path: Path) -> str:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no such file: {path}")
        return path.read_text(encoding="utf-8")

    @staticmethod
    def file_sha256(path: Path) -> str:
        digest = hashlib.sha256()
        with open(path, "rb") as handle:
            for block in iter(lambda: handle.read(1 << 20), b""):
                digest.update(block)
        return digest.hexdigest()
