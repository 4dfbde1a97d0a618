"""Corpus ingestion, keyword/language filtering, quality screening and sampling."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

# Stems only: substring matching also covers the plural forms.
DEFAULT_KEYWORDS = (
    "lootbox",
    "loot box",
    "card pack",
    "loot crate",
    "loot case",
    "gacha",
    "mystery box",
)

_CORE_FIELDS = ("id", "game_id", "game_name", "language", "body")


class CorpusError(Exception):
    pass


class TargetTooLarge(CorpusError):
    pass


class QualityFlag(str, Enum):
    REPETITION = "Repetition"
    EMPTY = "Empty"
    OVER_LENGTH = "OverLength"


class RejectReason(str, Enum):
    DUPLICATE_ID = "DuplicateId"
    MALFORMED_RECORD = "MalformedRecord"


class ExclusionReason(str, Enum):
    LANGUAGE_EXCLUDED = "LanguageExcluded"
    NO_KEYWORD = "NoKeyword"


@dataclass(frozen=True)
class QualityConfig:
    repetition_fraction: float = 0.8
    repetition_min_length: int = 6
    max_chars: int = 16_000


def _repetition_share(body: str) -> float:
    """Largest share of ``body`` covered by one character or one 3-gram.

    3-gram coverage counts non-overlapping occurrences, so ``"skyskysky"``
    is fully covered by ``"sky"``.
    """
    n = len(body)
    if n == 0:
        return 0.0
    best = max(Counter(body).values()) / n
    if n >= 3:
        grams = {body[i : i + 3] for i in range(n - 2)}
        best = max(best, max(body.count(g) * 3 for g in grams) / n)
    return best


def quality_screen(text: "UserText | str", config: QualityConfig = QualityConfig()) -> frozenset[QualityFlag]:
    body = text if isinstance(text, str) else text.body
    flags = set()
    if not body.strip():
        flags.add(QualityFlag.EMPTY)
    if len(body) >= config.repetition_min_length and _repetition_share(body) >= config.repetition_fraction:
        flags.add(QualityFlag.REPETITION)
    if len(body) > config.max_chars:
        flags.add(QualityFlag.OVER_LENGTH)
    return frozenset(flags)


@dataclass(frozen=True)
class UserText:
    id: str
    body: str
    language: str
    game_id: str = ""
    game_name: str = ""
    metadata: dict[str, str] = field(default_factory=dict)
    quality_flags: frozenset[QualityFlag] = frozenset()

    def to_record(self) -> dict:
        record = {
            "id": self.id,
            "game_id": self.game_id,
            "game_name": self.game_name,
            "language": self.language,
            "body": self.body,
        }
        record.update(self.metadata)
        return record


@dataclass(frozen=True)
class Corpus:
    texts: tuple[UserText, ...]
    source_fingerprint: str

    @classmethod
    def from_texts(cls, texts: Iterable[UserText]) -> "Corpus":
        texts = tuple(texts)
        return cls(texts, fingerprint_texts(texts))

    def __len__(self) -> int:
        return len(self.texts)

    def __iter__(self):
        return iter(self.texts)

    def ids(self) -> list[str]:
        return [t.id for t in self.texts]

    def by_id(self) -> dict[str, UserText]:
        return {t.id: t for t in self.texts}


def fingerprint_texts(texts: Iterable[UserText]) -> str:
    h = hashlib.sha256()
    for t in texts:
        h.update(_dump_line(t.to_record()).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass(frozen=True)
class Rejection:
    line_no: int
    reason: RejectReason
    detail: str


@dataclass
class LoadReport:
    rejected: list[Rejection] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.rejected


def _dump_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=False, separators=(",", ":"))


def _scalar_str(value) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value)


def load_corpus(
    source: "Iterable[str] | str | Path",
    quality: QualityConfig = QualityConfig(),
) -> tuple[Corpus, LoadReport]:
    """Read line-delimited JSON records into a :class:`Corpus`.

    ``source`` is a path or any iterable of lines. Bad lines are skipped and
    listed in the returned :class:`LoadReport`; loading never aborts.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8", newline="") as fh:
            return load_corpus(fh.read().split("\n"), quality)

    report = LoadReport()
    texts: list[UserText] = []
    seen: set[str] = set()
    for line_no, line in enumerate(source, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            report.rejected.append(Rejection(line_no, RejectReason.MALFORMED_RECORD, f"invalid JSON: {exc.msg}"))
            continue
        if not isinstance(record, dict):
            report.rejected.append(Rejection(line_no, RejectReason.MALFORMED_RECORD, "record is not an object"))
            continue
        missing = [k for k in ("id", "body", "language") if not isinstance(record.get(k), str)]
        if missing:
            report.rejected.append(
                Rejection(line_no, RejectReason.MALFORMED_RECORD, "missing or non-string: " + ", ".join(missing))
            )
            continue
        if record["id"] in seen:
            report.rejected.append(Rejection(line_no, RejectReason.DUPLICATE_ID, record["id"]))
            continue
        seen.add(record["id"])
        metadata = {k: _scalar_str(v) for k, v in record.items() if k not in _CORE_FIELDS}
        body = record["body"]
        texts.append(
            UserText(
                id=record["id"],
                body=body,
                language=record["language"],
                game_id=_scalar_str(record.get("game_id", "")),
                game_name=_scalar_str(record.get("game_name", "")),
                metadata=metadata,
                quality_flags=quality_screen(body, quality),
            )
        )
    return Corpus.from_texts(texts), report


def serialize_corpus(corpus: Corpus) -> str:
    return "".join(_dump_line(t.to_record()) + "\n" for t in corpus.texts)


def write_corpus(corpus: Corpus, path: "str | Path") -> None:
    Path(path).write_text(serialize_corpus(corpus), encoding="utf-8")


@dataclass(frozen=True)
class FilterSpec:
    allowed_languages: frozenset[str] | None = frozenset({"en", "de"})
    keywords: tuple[str, ...] = DEFAULT_KEYWORDS
    case_insensitive: bool = True
    keyword_filter: bool = True

    def __post_init__(self):
        if self.keyword_filter and not self.keywords:
            raise CorpusError("keyword filtering enabled with an empty keyword list")


@dataclass
class FilterReport:
    counts: dict[ExclusionReason, int] = field(default_factory=lambda: {r: 0 for r in ExclusionReason})
    retained: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["reason", "count"])
        for reason in ExclusionReason:
            writer.writerow([reason.value, self.counts[reason]])
        return buf.getvalue()


def _matches_keyword(body: str, spec: FilterSpec) -> bool:
    if spec.case_insensitive:
        folded = body.casefold()
        return any(k.casefold() in folded for k in spec.keywords)
    return any(k in body for k in spec.keywords)


def apply_filters(corpus: Corpus, spec: FilterSpec) -> tuple[Corpus, FilterReport]:
    report = FilterReport()
    kept = []
    for text in corpus.texts:
        if spec.allowed_languages is not None and text.language not in spec.allowed_languages:
            report.counts[ExclusionReason.LANGUAGE_EXCLUDED] += 1
        elif spec.keyword_filter and not _matches_keyword(text.body, spec):
            report.counts[ExclusionReason.NO_KEYWORD] += 1
        else:
            kept.append(text)
    report.retained = len(kept)
    return Corpus.from_texts(kept), report


STRATA_KEYS = ("game_id", "language")


@dataclass(frozen=True)
class SampleSpec:
    target_size: int
    strata_keys: tuple[str, ...] = STRATA_KEYS
    seed: int = 0

    def __post_init__(self):
        if self.target_size < 1:
            raise CorpusError("target_size must be positive")
        bad = [k for k in self.strata_keys if k not in STRATA_KEYS]
        if bad:
            raise CorpusError(f"unsupported strata keys: {bad}")


def allocate(sizes: dict[tuple, int], target: int) -> dict[tuple, int]:
    """Split ``target`` across strata of the given sizes.

    Equal floor share per stratum; the remainder goes one apiece to the
    largest strata (ties by key). Strata that run out of texts drop out and
    their shortfall is re-split by the same rule.
    """
    if target > sum(sizes.values()):
        raise TargetTooLarge(f"target {target} exceeds available {sum(sizes.values())}")
    quota = {k: 0 for k in sizes}
    remaining = target
    while remaining > 0:
        active = sorted((k for k in sizes if sizes[k] > quota[k]), key=lambda k: (-sizes[k], k))
        base, extra = divmod(remaining, len(active))
        for i, key in enumerate(active):
            give = min(base + (1 if i < extra else 0), sizes[key] - quota[key])
            quota[key] += give
            remaining -= give
    return quota


def _stratum_rng(seed: int, key: tuple) -> random.Random:
    material = json.dumps([seed, list(key)], ensure_ascii=False)
    return random.Random(int.from_bytes(hashlib.sha256(material.encode("utf-8")).digest()[:8], "big"))


def stratified_sample(corpus: Corpus, spec: SampleSpec) -> Corpus:
    if not len(corpus):
        raise CorpusError("cannot sample an empty corpus")
    if spec.target_size > len(corpus):
        raise TargetTooLarge(f"target {spec.target_size} exceeds corpus size {len(corpus)}")
    strata: dict[tuple, list[int]] = {}
    for i, text in enumerate(corpus.texts):
        strata.setdefault(tuple(getattr(text, k) for k in spec.strata_keys), []).append(i)
    quota = allocate({k: len(v) for k, v in strata.items()}, spec.target_size)
    chosen: set[int] = set()
    for key in sorted(strata):
        chosen.update(_stratum_rng(spec.seed, key).sample(strata[key], quota[key]))
    return Corpus.from_texts(corpus.texts[i] for i in sorted(chosen))


def random_draw(corpus: Corpus, size: int, seed: int, exclude_ids: Sequence[str] = ()) -> Corpus:
    """Simple random draw, e.g. a validation set disjoint from the training sample."""
    excluded = set(exclude_ids)
    pool = [i for i, t in enumerate(corpus.texts) if t.id not in excluded]
    if size > len(pool):
        raise TargetTooLarge(f"target {size} exceeds available {len(pool)}")
    chosen = sorted(random.Random(seed).sample(pool, size))
    return Corpus.from_texts(corpus.texts[i] for i in chosen)
