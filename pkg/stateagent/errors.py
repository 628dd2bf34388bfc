from typing import Optional


class StateAgentError(Exception):
    """Base class for every typed error raised by the runtime.

    ``code`` is the machine-readable identifier surfaced to policies inside
    error observations and used by the CLI to pick exit codes.
    """

    code = "StateAgentError"

    def __init__(self, message: Optional[str] = None):
        super().__init__(message or self.code)
        self.message = message or self.code


# context-core
class UnknownMsgId(StateAgentError):
    code = "UnknownMsgId"


class ProtectedMessage(StateAgentError):
    code = "ProtectedMessage"


class InvalidMode(StateAgentError):
    code = "InvalidMode"


# corpus-index / spellbook
class EmptyCorpus(StateAgentError):
    code = "EmptyCorpus"


class IndexAlreadyBuilt(StateAgentError):
    code = "IndexAlreadyBuilt"


class NoIndex(StateAgentError):
    code = "NoIndex"


class UnknownChunk(StateAgentError):
    code = "UnknownChunk"


class ToolDisabled(StateAgentError):
    code = "ToolDisabled"


class DuplicateKey(StateAgentError):
    code = "DuplicateKey"


class UnknownKey(StateAgentError):
    code = "UnknownKey"


class InvalidArguments(StateAgentError):
    code = "InvalidArguments"


class UnknownTool(StateAgentError):
    code = "UnknownTool"


class EpisodeClosed(StateAgentError):
    code = "EpisodeClosed"


# policy-clients
class PlanError(StateAgentError):
    code = "PlanError"


class PlanExhausted(StateAgentError):
    code = "PlanExhausted"


class TransportError(StateAgentError):
    code = "TransportError"


class MalformedResponse(StateAgentError):
    code = "MalformedResponse"

    def __init__(self, message: Optional[str] = None, raw_text: str = ""):
        super().__init__(message)
        # assistant text that came back without a usable tool call
        self.raw_text = raw_text


# data-forge
class GraderUnavailable(StateAgentError):
    code = "GraderUnavailable"


class ReplayMismatch(StateAgentError):
    code = "ReplayMismatch"


class InvalidGroup(StateAgentError):
    code = "InvalidGroup"
