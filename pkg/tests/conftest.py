import numpy as np
import pytest

from stateagent.errors import TransportError
from stateagent.models.context import InteractionState, Message, Role, TokenCounter
from stateagent.models.policy import NoteRule, OraclePlan
from stateagent.models.tools import DeleteMode, ToolSet
from stateagent.models.trajectory import EpisodeConfig, ScanMode
from stateagent.services.context import append
from stateagent.services.policy import Policy

WORDS = [
    "river", "stone", "lamp", "harbor", "field", "window", "garden", "letter", "signal", "bridge",
    "market", "engine", "winter", "forest", "copper", "silver", "ladder", "pocket", "thread", "valley",
]

FACT_KEY = "vault code"
FACT_VALUE = "k7q2x9"
FACT_SENTENCE = f"The vault code is {FACT_VALUE}."


def make_paragraph(rng: np.random.Generator, words: int) -> str:
    picked = rng.integers(len(WORDS), size=words)
    text = " ".join(WORDS[i] for i in picked)
    return text[0].upper() + text[1:] + "."


class UnreachablePolicy(Policy):
    """Plays a few decisions, then fails like an endpoint that stays down."""

    name = "unreachable"

    def __init__(self, decisions=()):
        self._decisions = list(decisions)

    async def step(self, view):
        if self._decisions:
            return self._decisions.pop(0)
        raise TransportError("chat completion failed after 3 attempts: HTTP 503")


def make_corpus(paragraphs: int, words_per_paragraph: int = 400, seed: int = 0, fact_at: int = None) -> str:
    """Paragraph corpus; with ``fact_at`` the vault-code sentence closes that paragraph."""
    rng = np.random.default_rng(seed)
    parts = []
    for i in range(paragraphs):
        paragraph = make_paragraph(rng, words_per_paragraph)
        if i == fact_at:
            paragraph = f"{paragraph} {FACT_SENTENCE}"
        parts.append(paragraph)
    return "\n\n".join(parts)


@pytest.fixture
def counter():
    return TokenCounter()


@pytest.fixture
def corpus():
    # four paragraphs of ~400 words: one chunk each at chunk_size 512
    return make_corpus(4, fact_at=2)


@pytest.fixture
def config():
    return EpisodeConfig(token_budget=32000, rounds_budget=60, max_rounds=80)


@pytest.fixture
def toolcalls_config():
    return EpisodeConfig(
        token_budget=32000,
        rounds_budget=60,
        max_rounds=80,
        tool_set=ToolSet.without_search(DeleteMode.TOOLCALLS_ONLY),
    )


@pytest.fixture
def fact_rule():
    return NoteRule(key="vault", pattern=r"The vault code is (?P<value>\w+)\.")


@pytest.fixture
def linear_plan(fact_rule):
    return OraclePlan(strategy=ScanMode.LINEAR_SCAN, note_schedule=[fact_rule], chunk_size=512)


@pytest.fixture
def search_plan(fact_rule):
    return OraclePlan(
        strategy=ScanMode.KEYWORD_SEARCH, target_keys=["vault"], note_schedule=[fact_rule], chunk_size=512, top_k=3
    )


@pytest.fixture
def state():
    """A state holding just the user query as msg 0."""
    s = InteractionState(query="What is the vault code?")
    append(s, Message(role=Role.USER, content=s.query))
    s.query_msg_id = 0
    return s
