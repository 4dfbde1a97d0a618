"""Study orchestration: relevance pre-filter, classification cells, reliability runs."""

from __future__ import annotations

import json
import re
import time
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import __version__
from .agreement import (
    AgreementError,
    AlphaResult,
    LabelVector,
    bootstrap_counts,
    krippendorff_alpha,
    reliability_data,
)
from .corpus import Corpus
from .extraction import DEFAULT_CONFIG, ExtractionConfig, ExtractionOutcome, FailureKind, extract
from .gateway import Backend, Completion, ModelConfig, TranscriptLog, complete_batch, text_fingerprint
from .prompts import PROFILES, ModelProfile, Strategy, Task, label_domain, parse_enum, render_prompt, template_fingerprints


class RunnerError(Exception):
    pass


class EmptyInput(RunnerError):
    pass


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", name).strip("-") or "model"


@dataclass(frozen=True)
class Cell:
    model: ModelConfig
    strategy: Strategy
    task: Task

    def __post_init__(self):
        if self.task is Task.RELEVANCE:
            raise RunnerError("relevance runs through prefilter_relevance, not a cell")

    @property
    def cell_id(self) -> str:
        return f"{_safe(self.model.model_id)}__{self.strategy.short}__{self.task.slug}"


@dataclass(frozen=True)
class ClassificationRecord:
    unit_id: str
    model_id: str
    strategy: Strategy
    task: Task
    instance_index: int
    outcome: ExtractionOutcome
    completion_fingerprint: str | None
    timestamp: float = field(default=0.0, compare=False)

    @property
    def cell_id(self) -> str:
        return f"{_safe(self.model_id)}__{self.strategy.short}__{self.task.slug}"

    def to_json(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "model_id": self.model_id,
            "strategy": self.strategy.value,
            "task": self.task.value,
            "instance": self.instance_index,
            "label": self.outcome.label,
            "failure": self.outcome.failure.value if self.outcome.failure else None,
            "fingerprint": self.completion_fingerprint,
        }


class TranscriptStore:
    """Raw responses keyed by fingerprint: ``<root>/<fp>.txt``, or in memory."""

    def __init__(self, root: "str | Path | None" = None):
        self.root = Path(root) if root is not None else None
        self._memory: dict[str, str] = {}

    def put(self, text: str) -> str:
        fp = text_fingerprint(text)
        if self.root is None:
            self._memory[fp] = text
            return fp
        path = self.root / f"{fp}.txt"
        if not path.exists():
            self.root.mkdir(parents=True, exist_ok=True)
            path.write_bytes(text.encode("utf-8"))
        return fp

    def get(self, fp: str) -> str | None:
        if self.root is None:
            return self._memory.get(fp)
        path = self.root / f"{fp}.txt"
        return path.read_bytes().decode("utf-8") if path.exists() else None

    def __contains__(self, fp: str) -> bool:
        return self.get(fp) is not None


def write_records(records: Iterable[ClassificationRecord], path: "str | Path") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True) + "\n" for r in records]
    path.write_text("".join(lines), encoding="utf-8")


def read_records(path: "str | Path", transcripts: TranscriptStore | None = None) -> list[ClassificationRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        raw = json.loads(line)
        fp = raw.get("fingerprint")
        text = (transcripts.get(fp) if transcripts and fp else None) or ""
        if raw.get("failure"):
            outcome = ExtractionOutcome.failed(FailureKind(raw["failure"]), text)
        else:
            outcome = ExtractionOutcome(label=raw["label"], raw=text)
        records.append(
            ClassificationRecord(
                unit_id=raw["unit_id"],
                model_id=raw["model_id"],
                strategy=parse_enum(Strategy, raw["strategy"]),
                task=parse_enum(Task, raw["task"]),
                instance_index=raw["instance"],
                outcome=outcome,
                completion_fingerprint=fp,
            )
        )
    return records


def _profile(model: ModelConfig, profiles: Mapping[str, ModelProfile]) -> ModelProfile:
    try:
        return profiles[model.profile_id]
    except KeyError:
        raise RunnerError(f"unknown model profile {model.profile_id!r}") from None


def _classify(
    model: ModelConfig,
    strategy: Strategy,
    task: Task,
    corpus: Corpus,
    backend: Backend,
    instance_index: int,
    profiles: Mapping[str, ModelProfile],
    transcripts: TranscriptStore | None,
    transcript_log: TranscriptLog | None,
    extraction: ExtractionConfig,
    sleep,
) -> list[ClassificationRecord]:
    if not len(corpus):
        raise EmptyInput("corpus is empty")
    profile = _profile(model, profiles)
    prompts = [render_prompt(task, strategy, profile, t.body) for t in corpus.texts]
    kwargs = {"sleep": sleep} if sleep is not None else {}
    results = complete_batch(backend, model, prompts, instance_index, transcript_log, **kwargs)
    records = []
    for text, result in zip(corpus.texts, results):
        if isinstance(result, Completion):
            fp = transcripts.put(result.text) if transcripts is not None else result.fingerprint
            outcome = extract(task, result.text, extraction, input_text=text.body)
        else:
            fp = None
            outcome = ExtractionOutcome.failed(FailureKind.UNAVAILABLE, str(result))
        records.append(
            ClassificationRecord(text.id, model.model_id, strategy, task, instance_index, outcome, fp, time.time())
        )
    return records


def run_cell(
    cell: Cell,
    corpus: Corpus,
    backend: Backend,
    instance_index: int = 0,
    *,
    profiles: Mapping[str, ModelProfile] = PROFILES,
    transcripts: TranscriptStore | None = None,
    transcript_log: TranscriptLog | None = None,
    extraction: ExtractionConfig = DEFAULT_CONFIG,
    sleep=None,
) -> list[ClassificationRecord]:
    """Classify every text in ``corpus``; records align 1:1 with the texts."""
    return _classify(
        cell.model, cell.strategy, cell.task, corpus, backend, instance_index,
        profiles, transcripts, transcript_log, extraction, sleep,
    )


def label_vector(records: Iterable[ClassificationRecord], coder_id: str, task: Task | None = None) -> tuple[LabelVector, Counter]:
    """Labels of the successful records; failures are counted, not labeled."""
    labels = {}
    excluded: Counter = Counter()
    for r in records:
        if r.outcome.ok:
            labels[r.unit_id] = r.outcome.label
        else:
            excluded[r.outcome.failure.value] += 1
    domain = label_domain(task) if task is not None else None
    return LabelVector(coder_id, labels, domain), excluded


@dataclass
class PrefilterReport:
    n_texts: int = 0
    both_relevant: int = 0
    both_not_relevant: int = 0
    conflicts: int = 0
    unresolved: list[str] = field(default_factory=list)
    decisions: dict[str, dict] = field(default_factory=dict)

    @property
    def agreement_rate(self) -> float | None:
        resolved = self.both_relevant + self.both_not_relevant + self.conflicts
        if not resolved:
            return None
        return (self.both_relevant + self.both_not_relevant) / resolved

    def to_json(self) -> dict:
        data = asdict(self)
        data["agreement_rate"] = self.agreement_rate
        return data


def prefilter_relevance(
    corpus: Corpus,
    model_a: ModelConfig,
    model_b: ModelConfig,
    backend: Backend,
    *,
    profiles: Mapping[str, ModelProfile] = PROFILES,
    transcripts: TranscriptStore | None = None,
    transcript_log: TranscriptLog | None = None,
    sleep=None,
) -> tuple[Corpus, PrefilterReport, list[ClassificationRecord]]:
    """Two-model relevance screen.

    A text is dropped only when both models say ``not_relevant``. Conflicts
    and texts where either model gave no usable answer are kept.
    """
    runs = [
        _classify(m, Strategy.ZERO_SHOT, Task.RELEVANCE, corpus, backend, 0, profiles, transcripts,
                  transcript_log, DEFAULT_CONFIG, sleep)
        for m in (model_a, model_b)
    ]
    report = PrefilterReport(n_texts=len(corpus))
    kept = []
    for text, ra, rb in zip(corpus.texts, *runs):
        a, b = ra.outcome.label, rb.outcome.label
        if a is None or b is None:
            report.unresolved.append(text.id)
            keep, status = True, "Unresolved"
        elif a == b == "relevant":
            report.both_relevant += 1
            keep, status = True, "Relevant"
        elif a == b == "not_relevant":
            report.both_not_relevant += 1
            keep, status = False, "NotRelevant"
        else:
            report.conflicts += 1
            keep, status = True, "Conflict"
        report.decisions[text.id] = {"a": ra.outcome.describe(), "b": rb.outcome.describe(), "status": status}
        if keep:
            kept.append(text)
    return Corpus.from_texts(kept), report, runs[0] + runs[1]


@dataclass
class ReliabilityResult:
    cell_id: str
    k: int
    alpha: AlphaResult | None
    undefined_reason: str | None
    disagreements: list[str]
    excluded: dict[str, int]
    records: list[list[ClassificationRecord]] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        alpha = None
        if self.alpha is not None:
            alpha = asdict(self.alpha)
        return {
            "cell": self.cell_id,
            "k": self.k,
            "alpha": alpha,
            "undefined_reason": self.undefined_reason,
            "n_disagreements": len(self.disagreements),
            "disagreements": self.disagreements,
            "excluded": self.excluded,
        }


def instance_alpha(
    vectors: Sequence[LabelVector],
    domain: Sequence[str] | None,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[AlphaResult | None, str | None]:
    try:
        result = krippendorff_alpha(vectors, domain)
    except AgreementError as exc:
        return None, type(exc).__name__
    if n_resamples:
        counts = reliability_data(vectors, domain).counts
        ci = bootstrap_counts(counts, n_resamples, level, seed)
        result = AlphaResult(result.alpha, result.observed_disagreement, result.expected_disagreement,
                             result.n_pairable, ci)
    return result, None


def disagreeing_units(vectors: Sequence[LabelVector]) -> list[str]:
    values = defaultdict(set)
    for vec in vectors:
        for unit, label in vec.labels.items():
            values[unit].add(label)
    return sorted(u for u, labels in values.items() if len(labels) > 1)


def run_reliability(
    cell: Cell,
    corpus: Corpus,
    backend: Backend,
    k: int = 10,
    *,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    **kwargs,
) -> ReliabilityResult:
    """Run ``k`` instances of one cell and measure their agreement with alpha."""
    if k < 2:
        raise RunnerError("k must be >= 2")
    runs = [run_cell(cell, corpus, backend, i, **kwargs) for i in range(k)]
    vectors, excluded = [], Counter()
    for i, records in enumerate(runs):
        vec, exc = label_vector(records, f"instance-{i}", cell.task)
        vectors.append(vec)
        excluded.update(exc)
    alpha, reason = instance_alpha(vectors, label_domain(cell.task), n_resamples, level, seed)
    return ReliabilityResult(cell.cell_id, k, alpha, reason, disagreeing_units(vectors), dict(excluded), runs)


@dataclass(frozen=True)
class ShareTable:
    cell_id: str
    task: Task
    labels: tuple[str, ...]
    counts: dict[str, int]
    percents: dict[str, str] | None
    failures: dict[str, int]
    denominator: int

    @property
    def n_failures(self) -> int:
        return sum(self.failures.values())


def percent(count: int, denominator: int) -> str:
    value = (Decimal(count) * 100 / Decimal(denominator)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{value:.2f}"


def aggregate_shares(records: Sequence[ClassificationRecord]) -> ShareTable:
    if not records:
        raise EmptyInput("no records")
    cells = {r.cell_id for r in records}
    if len(cells) != 1:
        raise RunnerError(f"records span several cells: {sorted(cells)}")
    task = records[0].task
    labels = label_domain(task)
    counts = Counter(r.outcome.label for r in records if r.outcome.ok)
    failures = Counter(r.outcome.failure.value for r in records if not r.outcome.ok)
    denominator = sum(counts.values())
    percents = {lab: percent(counts[lab], denominator) for lab in labels} if denominator else None
    return ShareTable(
        cell_id=records[0].cell_id,
        task=task,
        labels=labels,
        counts={lab: counts[lab] for lab in labels},
        percents=percents,
        failures=dict(sorted(failures.items())),
        denominator=denominator,
    )


@dataclass(frozen=True)
class DisagreementEntry:
    unit_id: str
    cell_id: str
    reference_label: str
    model_label: str
    body: str
    response: str


@dataclass
class DisagreementReport:
    groups: dict[tuple[str, str], list[DisagreementEntry]]

    @property
    def entries(self) -> list[DisagreementEntry]:
        return sorted((e for g in self.groups.values() for e in g), key=lambda e: (e.unit_id, e.cell_id))

    def __len__(self) -> int:
        return sum(len(g) for g in self.groups.values())

    def to_json(self) -> dict:
        return {
            "n_entries": len(self),
            "groups": [
                {"reference": ref, "model": got, "entries": [asdict(e) for e in entries]}
                for (ref, got), entries in self.groups.items()
            ],
        }


def disagreement_report(
    records: Sequence[ClassificationRecord],
    reference: LabelVector,
    corpus: Corpus | None = None,
    transcripts: TranscriptStore | None = None,
) -> DisagreementReport:
    """Units where the model differs from the reference or produced no label."""
    bodies = corpus.by_id() if corpus is not None else {}
    grouped = defaultdict(list)
    for r in records:
        ref = reference.labels.get(r.unit_id)
        if ref is None:
            continue
        got = r.outcome.describe()
        if r.outcome.ok and got == ref:
            continue
        response = r.outcome.raw
        if not response and transcripts is not None and r.completion_fingerprint:
            response = transcripts.get(r.completion_fingerprint) or ""
        text = bodies.get(r.unit_id)
        grouped[(ref, got)].append(
            DisagreementEntry(r.unit_id, r.cell_id, ref, got, text.body if text else "", response)
        )
    return DisagreementReport(
        {key: sorted(grouped[key], key=lambda e: (e.unit_id, e.cell_id)) for key in sorted(grouped)}
    )


@dataclass
class RunManifest:
    corpus_fingerprint: str
    cells: list[str]
    temperatures: dict[str, float]
    seeds: dict[str, int]
    backend_kind: str
    template_fingerprints: dict[str, str] = field(default_factory=template_fingerprints)
    tool_version: str = __version__
    command: str = ""
    created_at: str = ""
    extra: dict = field(default_factory=dict)

    def write(self, path: "str | Path") -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: "str | Path") -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))
