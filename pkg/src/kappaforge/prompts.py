"""Prompt rendering from the golden template segments in ``templates/``."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

USERTEXT_PLACEHOLDER = "{USERTEXT}"
SEGMENT_SEPARATOR = "\n\n"


class PromptError(Exception):
    pass


class UnsupportedCombination(PromptError):
    pass


class Task(str, Enum):
    RELEVANCE = "Relevance"
    ABSA = "Absa"
    GAMING_EXPERIENCE = "GamingExperience"
    FINANCIAL_ENGAGEMENT = "FinancialEngagement"
    GAMBLING_COMPARISON = "GamblingComparison"

    @property
    def slug(self) -> str:
        return _TASK_SLUGS[self]


_TASK_SLUGS = {
    Task.RELEVANCE: "relevance",
    Task.ABSA: "absa",
    Task.GAMING_EXPERIENCE: "gaming_experience",
    Task.FINANCIAL_ENGAGEMENT: "financial_engagement",
    Task.GAMBLING_COMPARISON: "gambling_comparison",
}

# The four tasks with published templates.
CODING_TASKS = (Task.ABSA, Task.GAMING_EXPERIENCE, Task.FINANCIAL_ENGAGEMENT, Task.GAMBLING_COMPARISON)


class Strategy(str, Enum):
    ZERO_SHOT = "ZeroShot"
    CHAIN_OF_THOUGHT = "ChainOfThought"
    THREE_OF_THOUGHT = "ThreeOfThought"

    @property
    def short(self) -> str:
        return {"ZeroShot": "zs", "ChainOfThought": "cot", "ThreeOfThought": "tot"}[self.value]


def parse_enum(enum_cls, value: str):
    """Accept an enum value, member name, slug or short code (case-insensitive)."""
    wanted = value.strip().lower()
    for member in enum_cls:
        names = {member.value.lower(), member.name.lower()}
        for attr in ("slug", "short"):
            if hasattr(member, attr):
                names.add(getattr(member, attr))
        if wanted in names:
            return member
    raise ValueError(f"unknown {enum_cls.__name__}: {value!r}")


@dataclass(frozen=True)
class Addition:
    id: str
    segment: str
    strategy: Strategy


# Model-specific reminders, applied only under their strategy.
ADDITIONS = {
    "tot_continuation": Addition("tot_continuation", "tot__llama_continuation", Strategy.THREE_OF_THOUGHT),
}


@dataclass(frozen=True)
class ModelProfile:
    profile_id: str = "default"
    extra_additions: tuple[str, ...] = ()

    def __post_init__(self):
        unknown = [a for a in self.extra_additions if a not in ADDITIONS]
        if unknown:
            raise PromptError(f"unknown prompt additions: {unknown}")


DEFAULT_PROFILE = ModelProfile()
LLAMA_PROFILE = ModelProfile("llama", ("tot_continuation",))
PROFILES = {p.profile_id: p for p in (DEFAULT_PROFILE, LLAMA_PROFILE)}


@lru_cache(maxsize=None)
def load_segment(name: str) -> str:
    path = resources.files("kappaforge").joinpath("templates", f"{name}.txt")
    return path.read_bytes().decode("utf-8")


def base_template(task: Task) -> str:
    return load_segment(f"{task.slug}__base")


def template_fingerprints() -> dict[str, str]:
    names = [f"{t.slug}__base" for t in Task]
    names += ["cot__a", "cot__b", "tot__base", "tot__llama_continuation", "usertext__block"]
    return {n: hashlib.sha256(load_segment(n).encode("utf-8")).hexdigest() for n in sorted(names)}


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    task: Task
    strategy: Strategy
    profile_id: str
    fingerprint: str
    body: str


def render_prompt(task: Task, strategy: Strategy, profile: ModelProfile, body: str) -> RenderedPrompt:
    """Assemble the prompt sent to a model.

    Layout: [ToT preamble] base template [CoT instruction] [profile additions]
    user-text block [CoT reminder]. Segments are joined by a blank line.
    """
    if not body:
        raise PromptError("body must be non-empty")
    head = []
    if strategy is Strategy.THREE_OF_THOUGHT:
        head.append(load_segment("tot__base"))
    head.append(base_template(task))
    if strategy is Strategy.CHAIN_OF_THOUGHT:
        head.append(load_segment("cot__a"))
    for addition_id in profile.extra_additions:
        addition = ADDITIONS[addition_id]
        if addition.strategy is strategy:
            head.append(load_segment(addition.segment))

    block = load_segment("usertext__block")
    # str.replace on the template, so braces inside the body are inert.
    head.append(block.replace(USERTEXT_PLACEHOLDER, body, 1))
    if strategy is Strategy.CHAIN_OF_THOUGHT:
        head.append(load_segment("cot__b"))
    text = SEGMENT_SEPARATOR.join(head)
    return RenderedPrompt(
        text=text,
        task=task,
        strategy=strategy,
        profile_id=profile.profile_id,
        fingerprint=hashlib.sha256(text.encode("utf-8")).hexdigest(),
        body=body,
    )


@dataclass(frozen=True)
class CodeGrammar:
    """How a task's answer code appears in a response.

    ``tokens`` grammars are matched as literal tokens; ``field`` grammars as
    ``<field>: <value>`` with one of ``values``.
    """

    kind: str
    values: tuple[str, ...]
    field: str | None = None
    tokens: tuple[str, ...] = ()


ABSA_TOKENS = ("Pos_code", "Neg_code", "0_code", "Nomention_code")
RELEVANCE_VALUES = ("relevant", "not_relevant")

_GRAMMARS = {
    Task.ABSA: CodeGrammar("tokens", ("Positive", "Negative", "Neutral", "NoMention"), tokens=ABSA_TOKENS),
    Task.GAMING_EXPERIENCE: CodeGrammar("field", ("0", "1"), field="Gaming_Exp_Mention"),
    Task.FINANCIAL_ENGAGEMENT: CodeGrammar("field", ("0", "1"), field="Payment_Willingness_Mention"),
    Task.GAMBLING_COMPARISON: CodeGrammar("field", ("0", "1"), field="Gambling_Mention"),
    Task.RELEVANCE: CodeGrammar("field", RELEVANCE_VALUES, field="Relevance_code"),
}


def expected_code_grammar(task: Task) -> CodeGrammar:
    return _GRAMMARS[task]


def label_domain(task: Task) -> tuple[str, ...]:
    return _GRAMMARS[task].values
