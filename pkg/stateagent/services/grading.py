import logging
import re
from abc import ABC, abstractmethod
from typing import Optional

from ..errors import GraderUnavailable, MalformedResponse, TransportError
from ..models.training import Correctness
from ..prompts import render_judge_prompt
from .remote import ChatCompletionsClient

logger = logging.getLogger(__name__)

_OPTION_PATTERNS = [
    re.compile(r"^\s*\(?([A-J])\)?\s*(?:[.:)\-]|$)"),
    re.compile(r"\b(?:answer|option|choice)\s*(?:is|:)?\s*\(?([A-J])\)?\b", re.I),
    re.compile(r"\(([A-J])\)"),
    re.compile(r"(?:^|\s)([A-J])[.)]?\s*$"),
]
_BOXED_RE = re.compile(r"\\boxed\{\s*(True|False)\s*\}", re.I)


def normalize(text: str) -> str:
    """Lowercase and drop everything that is not a letter or digit."""
    return "".join(ch for ch in text.lower() if ch.isalnum())


def contains_answer(answer: Optional[str], gold: str) -> bool:
    target = normalize(gold)
    return bool(answer) and bool(target) and target in normalize(answer)


def extract_option(answer: str) -> Optional[str]:
    for pattern in _OPTION_PATTERNS:
        match = pattern.search(answer)
        if match:
            return match.group(1).upper()
    return None


class Grader(ABC):
    @abstractmethod
    async def grade(self, question: str, answer: Optional[str], gold: str) -> Correctness:
        ...


class MultipleChoiceGrader(Grader):
    """Rule layer: compares the extracted option letter with a single-letter gold."""

    def __init__(self, accept_option_text: bool = False, option_text: Optional[dict] = None):
        self.accept_option_text = accept_option_text
        # letter -> option text, used when accept_option_text is set
        self.option_text = option_text or {}

    async def grade(self, question: str, answer: Optional[str], gold: str) -> Correctness:
        if not answer or not answer.strip():
            return Correctness.INCORRECT
        gold_letter = gold.strip().strip("()").upper()
        if extract_option(answer) == gold_letter:
            return Correctness.CORRECT
        text = self.option_text.get(gold_letter)
        if self.accept_option_text and text and normalize(answer) == normalize(text):
            return Correctness.CORRECT
        return Correctness.INCORRECT


class ContainmentGrader(Grader):
    async def grade(self, question: str, answer: Optional[str], gold: str) -> Correctness:
        return Correctness.CORRECT if contains_answer(answer, gold) else Correctness.INCORRECT


class LLMJudgeGrader(Grader):
    """Judge layer: asks a chat model for \\boxed{True|False}."""

    def __init__(self, client: ChatCompletionsClient):
        self.client = client

    async def grade(self, question: str, answer: Optional[str], gold: str) -> Correctness:
        if not answer or not answer.strip():
            return Correctness.INCORRECT
        prompt = render_judge_prompt(problem=question, answer=gold, student_answer=answer)
        payload = self.client.build_payload([{"role": "user", "content": prompt}])
        try:
            data = await self.client.complete(payload)
        except (TransportError, MalformedResponse) as exc:
            raise GraderUnavailable(f"judge endpoint failed: {exc.message}")
        try:
            content = data["choices"][0]["message"].get("content") or ""
        except (KeyError, IndexError, TypeError, AttributeError):
            raise GraderUnavailable("judge response has no message content")
        verdicts = _BOXED_RE.findall(content)
        if not verdicts:
            raise GraderUnavailable("judge reply carries no \\boxed{True|False} verdict")
        logger.debug("judge verdict: %s", verdicts[-1])
        return Correctness.CORRECT if verdicts[-1].lower() == "true" else Correctness.INCORRECT


class TwoLayerGrader(Grader):
    """Single-letter golds go to the rule layer; everything else to the judge or containment."""

    def __init__(self, judge: Optional[Grader] = None, rules: Optional[Grader] = None):
        self.rules = rules or MultipleChoiceGrader()
        self.judge = judge
        self.fallback = ContainmentGrader()

    async def grade(self, question: str, answer: Optional[str], gold: str) -> Correctness:
        if re.fullmatch(r"\(?[A-J]\)?", gold.strip()):
            return await self.rules.grade(question, answer, gold)
        if self.judge is not None:
            return await self.judge.grade(question, answer, gold)
        return await self.fallback.grade(question, answer, gold)
