from enum import Enum
from functools import lru_cache
from pathlib import Path

from jinja2 import Environment, FileSystemLoader, StrictUndefined

TEMPLATE_DIR = Path(__file__).parent / "templates"


class PromptPreset(str, Enum):
    COMPACT = "compact"
    AGENTIC = "agentic"


@lru_cache(maxsize=1)
def template_environment() -> Environment:
    return Environment(
        loader=FileSystemLoader(str(TEMPLATE_DIR)),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        trim_blocks=True,
        autoescape=False,
    )


@lru_cache(maxsize=None)
def load_prompt(preset: str = PromptPreset.COMPACT.value) -> str:
    """System prompt text for a preset name."""
    preset = PromptPreset(preset)
    return (TEMPLATE_DIR / f"system_{preset.value}.txt").read_text(encoding="utf-8").strip()


def render_judge_prompt(problem: str, answer: str, student_answer: str) -> str:
    template = template_environment().get_template("judge.j2")
    return template.render(problem=problem, answer=answer, student_answer=student_answer)
