"""Label extraction from free-text model responses.

Every function here is total: a response always maps to exactly one
:class:`ExtractionOutcome`, never an exception.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

from .prompts import ABSA_TOKENS, Task, expected_code_grammar


class FailureKind(str, Enum):
    MISSING_CODE = "MissingCode"
    CONFLICTING_CODES = "ConflictingCodes"
    REFUSAL = "Refusal"
    OFF_TASK = "OffTask"
    # Set by the runner when the gateway gave up; never produced by parsing.
    UNAVAILABLE = "Unavailable"


ABSA_LABELS = dict(zip(ABSA_TOKENS, ("Positive", "Negative", "Neutral", "NoMention")))

BINARY_FIELDS = ("Gaming_Exp_Mention", "Payment_Willingness_Mention", "Gambling_Mention", "Relevance_code")


@dataclass(frozen=True)
class ExtractionOutcome:
    label: str | None = None
    failure: FailureKind | None = None
    raw: str = ""

    def __post_init__(self):
        if (self.label is None) == (self.failure is None):
            raise ValueError("exactly one of label/failure must be set")

    @property
    def ok(self) -> bool:
        return self.failure is None

    def describe(self) -> str:
        return self.label if self.label is not None else self.failure.value

    @classmethod
    def failed(cls, kind: FailureKind, raw: str) -> "ExtractionOutcome":
        return cls(failure=kind, raw=raw)


_ABSA_RE = re.compile(r"(?<![A-Za-z0-9_])(Pos_code|Neg_code|0_code|Nomention_code)(?![A-Za-z0-9_])")
# Between field name and value: colons, whitespace, brackets, quotes, markdown emphasis.
_FILLER = r"[\s:=\[\]\(\)'\"*`]*"


@lru_cache(maxsize=None)
def _field_re(field_name: str, values: tuple[str, ...]) -> re.Pattern:
    alternatives = "|".join(sorted((re.escape(v) for v in values), key=len, reverse=True))
    return re.compile(
        rf"(?<![A-Za-z0-9_]){re.escape(field_name)}(?![A-Za-z0-9_]){_FILLER}({alternatives})(?![A-Za-z0-9_])",
        re.IGNORECASE,
    )


@lru_cache(maxsize=1)
def default_refusal_phrases() -> tuple[str, ...]:
    text = resources.files("kappaforge").joinpath("data", "refusal_phrases.txt").read_text(encoding="utf-8")
    return load_refusal_phrases(text)


def load_refusal_phrases(text: str) -> tuple[str, ...]:
    lines = (line.strip() for line in text.splitlines())
    return tuple(line for line in lines if line and not line.startswith("#"))


def has_code_token(response: str) -> bool:
    """True if any task's answer code can be parsed from ``response``."""
    if _ABSA_RE.search(response):
        return True
    for field_name in BINARY_FIELDS:
        if _field_re(field_name, ("0", "1", "relevant", "not_relevant")).search(response):
            return True
    return False


def detect_refusal(response: str, phrases: tuple[str, ...] | None = None) -> bool:
    if phrases is None:
        phrases = default_refusal_phrases()
    folded = response.casefold()
    if not any(p.casefold() in folded for p in phrases):
        return False
    return not has_code_token(response)


_WORD_RE = re.compile(r"\w{4,}", re.UNICODE)


def content_words(text: str) -> set[str]:
    return {w.casefold() for w in _WORD_RE.findall(text)}


def is_offtask(response: str, input_text: str, min_overlap: float = 0.10) -> bool:
    """Heuristic: the response shares too few content words with the input.

    Overlap is the fraction of the response's content words (length >= 4)
    that also occur in the input text.
    """
    words = content_words(response)
    if not words:
        return False
    return len(words & content_words(input_text)) / len(words) < min_overlap


@dataclass(frozen=True)
class ExtractionConfig:
    detect_refusal: bool = True
    refusal_phrases: tuple[str, ...] | None = None
    # Off by default; needs the input text.
    detect_offtask: bool = False
    offtask_min_overlap: float = 0.10


DEFAULT_CONFIG = ExtractionConfig()


def _no_code(response: str, config: ExtractionConfig, input_text: str | None) -> ExtractionOutcome:
    if config.detect_refusal and detect_refusal(response, config.refusal_phrases):
        return ExtractionOutcome.failed(FailureKind.REFUSAL, response)
    if config.detect_offtask and input_text is not None and is_offtask(
        response, input_text, config.offtask_min_overlap
    ):
        return ExtractionOutcome.failed(FailureKind.OFF_TASK, response)
    return ExtractionOutcome.failed(FailureKind.MISSING_CODE, response)


def extract_absa(
    response: str, config: ExtractionConfig = DEFAULT_CONFIG, input_text: str | None = None
) -> ExtractionOutcome:
    matches = _ABSA_RE.findall(response)
    if matches:
        return ExtractionOutcome(label=ABSA_LABELS[matches[-1]], raw=response)
    return _no_code(response, config, input_text)


def extract_binary(
    field_name: str,
    response: str,
    config: ExtractionConfig = DEFAULT_CONFIG,
    input_text: str | None = None,
) -> ExtractionOutcome:
    """Parse ``<field_name>: [0|1]``; the last occurrence wins.

    For ``Relevance_code`` the words ``relevant``/``not_relevant`` are also
    accepted and 0/1 are mapped onto them.
    """
    if field_name.casefold() not in {f.casefold() for f in BINARY_FIELDS}:
        raise ValueError(f"unknown field {field_name!r}")
    is_relevance = field_name.casefold() == "relevance_code"
    values = ("0", "1", "relevant", "not_relevant") if is_relevance else ("0", "1")
    matches = _field_re(field_name, values).findall(response)
    if not matches:
        return _no_code(response, config, input_text)
    value = matches[-1].lower()
    if is_relevance:
        value = {"1": "relevant", "0": "not_relevant"}.get(value, value)
    return ExtractionOutcome(label=value, raw=response)


def extract(
    task: Task, response: str, config: ExtractionConfig = DEFAULT_CONFIG, input_text: str | None = None
) -> ExtractionOutcome:
    grammar = expected_code_grammar(task)
    if grammar.kind == "tokens":
        return extract_absa(response, config, input_text)
    return extract_binary(grammar.field, response, config, input_text)
