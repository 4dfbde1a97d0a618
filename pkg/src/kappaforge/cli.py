"""``kappaforge`` command line: pipeline stages over a run directory."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .agreement import LabelVector, pairwise_matrix
from .corpus import (
    DEFAULT_KEYWORDS,
    Corpus,
    FilterSpec,
    SampleSpec,
    apply_filters,
    load_corpus,
    random_draw,
    stratified_sample,
    write_corpus,
)
from .extraction import ABSA_LABELS
from .gateway import LiveBackend, MockBackend, ModelConfig, RecordingBackend, ReplayBackend, ReplayCache, RetryPolicy, TranscriptLog
from .prompts import CODING_TASKS, Strategy, Task, label_domain, parse_enum
from .report import HeatmapSpec, emit_heatmap, emit_share_chart
from .runner import (
    Cell,
    RunManifest,
    TranscriptStore,
    aggregate_shares,
    disagreement_report,
    label_vector,
    prefilter_relevance,
    read_records,
    run_cell,
    run_reliability,
    write_records,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("kappaforge")

SUBCOMMANDS = ("ingest", "filter", "sample", "prefilter", "classify", "agree", "reliability", "shares", "report")


class CliError(Exception):
    exit_code = 1


class ConfigError(CliError):
    exit_code = 2


class UpstreamArtifactMissing(CliError):
    exit_code = 3


@dataclass
class Config:
    path: Path
    raw: dict
    out: Path
    seed: int
    backend: str
    models: dict[str, ModelConfig] = field(default_factory=dict)

    def section(self, name: str) -> dict:
        value = self.raw.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"[{name}] must be a table")
        return value

    def resolve(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.path.parent / p


def load_config(path: Path, overrides: argparse.Namespace) -> Config:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    run = raw.get("run", {})
    out = Path(overrides.out) if overrides.out else path.parent / run.get("out", "run")
    cfg = Config(
        path=path,
        raw=raw,
        out=out,
        seed=overrides.seed if overrides.seed is not None else int(run.get("seed", 0)),
        backend=overrides.backend or run.get("backend", "live"),
    )
    if cfg.backend not in ("live", "mock", "replay"):
        raise ConfigError(f"unknown backend {cfg.backend!r}")
    for entry in raw.get("models", []):
        try:
            retry = RetryPolicy(
                max_attempts=int(entry.get("max_attempts", 4)),
                base_backoff=float(entry.get("base_backoff", 0.5)),
            )
            model = ModelConfig(
                model_id=entry["id"],
                endpoint=entry.get("endpoint", ""),
                temperature=float(entry.get("temperature", 0.0)),
                max_in_flight=int(entry.get("max_in_flight", 4)),
                retry=retry,
                timeout=float(entry.get("timeout", 120.0)),
                min_interval=float(entry.get("min_interval", 0.0)),
                profile_id=entry.get("profile", "default"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad [[models]] entry {entry!r}: {exc}") from exc
        except Exception as exc:
            raise ConfigError(str(exc)) from exc
        cfg.models[model.model_id] = model
    return cfg


def _model(cfg: Config, model_id: str) -> ModelConfig:
    try:
        return cfg.models[model_id]
    except KeyError:
        raise ConfigError(f"model {model_id!r} not declared in [[models]]") from None


def _enum_list(enum_cls, values, default):
    try:
        return [parse_enum(enum_cls, v) for v in values] if values else list(default)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _cells(cfg: Config) -> list[Cell]:
    section = cfg.section("classify")
    models = section.get("models") or list(cfg.models)
    strategies = _enum_list(Strategy, section.get("strategies"), Strategy)
    tasks = _enum_list(Task, section.get("tasks"), CODING_TASKS)
    return [Cell(_model(cfg, m), s, t) for m in models for s in strategies for t in tasks]


def _backend(cfg: Config):
    run = cfg.section("run")
    cache_dir = run.get("cache_dir")
    cache = ReplayCache(cfg.resolve(cache_dir)) if cache_dir else None
    if cfg.backend == "replay":
        if cache is None:
            raise ConfigError("replay backend requires run.cache_dir")
        return ReplayBackend(cache)
    if cfg.backend == "mock":
        script = run.get("mock_script")
        if not script:
            raise ConfigError("mock backend requires a script file (run.mock_script)")
        script_path = cfg.resolve(script)
        if not script_path.exists():
            raise ConfigError(f"mock script not found: {script_path}")
        inner = MockBackend.from_script(script_path)
    else:
        inner = LiveBackend()
    return RecordingBackend(inner, cache) if cache is not None else inner


def _require(path: Path) -> Path:
    if not path.exists():
        raise UpstreamArtifactMissing(f"missing upstream artifact: {path}")
    return path


def _read_corpus(path: Path) -> Corpus:
    corpus, report = load_corpus(_require(path))
    if report.rejected:
        log.warning("%s: %d lines rejected", path, len(report.rejected))
    return corpus


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(text.encode("utf-8"))


def _manifest(cfg: Config, command: str, corpus: Corpus | None, cells=(), extra=None) -> None:
    """Written before any backend call so every run is traceable."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(cfg.path, cfg.out / "config.toml")
    RunManifest(
        corpus_fingerprint=corpus.source_fingerprint if corpus is not None else "",
        cells=[c.cell_id for c in cells],
        temperatures={m.model_id: m.temperature for m in cfg.models.values()},
        seeds={"run": cfg.seed},
        backend_kind=cfg.backend,
        command=command,
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        extra=extra or {},
    ).write(cfg.out / "manifest.json")


# -- stages ---------------------------------------------------------------

def cmd_ingest(cfg: Config) -> None:
    source = cfg.section("corpus").get("path")
    if not source:
        raise ConfigError("[corpus] path is required")
    corpus, report = load_corpus(_require(cfg.resolve(source)))
    _manifest(cfg, "ingest", corpus)
    write_corpus(corpus, cfg.out / "corpus.jsonl")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["line", "reason", "detail"])
    for r in report.rejected:
        writer.writerow([r.line_no, r.reason.value, r.detail])
    _write(cfg.out / "load_report.csv", buf.getvalue())
    log.info("ingested %d texts, rejected %d lines", len(corpus), len(report.rejected))


def cmd_filter(cfg: Config) -> None:
    section = cfg.section("filter")
    languages = section.get("languages", ["en", "de"])
    spec = FilterSpec(
        allowed_languages=frozenset(languages) if languages else None,
        keywords=tuple(section.get("keywords", DEFAULT_KEYWORDS)),
        case_insensitive=bool(section.get("case_insensitive", True)),
        keyword_filter=bool(section.get("keyword_filter", True)),
    )
    corpus = _read_corpus(cfg.out / "corpus.jsonl")
    _manifest(cfg, "filter", corpus)
    filtered, report = apply_filters(corpus, spec)
    write_corpus(filtered, cfg.out / "corpus.filtered.jsonl")
    _write(cfg.out / "filter_report.csv", report.to_csv())
    log.info("filter kept %d of %d texts", len(filtered), len(corpus))


def cmd_sample(cfg: Config) -> None:
    section = cfg.section("sample")
    if "target_size" not in section:
        raise ConfigError("[sample] target_size is required")
    seed = int(section.get("seed", cfg.seed))
    corpus = _read_corpus(cfg.out / section.get("input", "corpus.filtered.jsonl"))
    _manifest(cfg, "sample", corpus)
    sample = stratified_sample(
        corpus, SampleSpec(int(section["target_size"]), tuple(section.get("strata", ["game_id", "language"])), seed)
    )
    write_corpus(sample, cfg.out / "sample.jsonl")
    validation_size = int(section.get("validation_size", 0))
    if validation_size:
        validation = random_draw(corpus, validation_size, int(section.get("validation_seed", seed + 1)), sample.ids())
        write_corpus(validation, cfg.out / "validation.jsonl")
    log.info("sampled %d texts", len(sample))


def cmd_prefilter(cfg: Config) -> None:
    section = cfg.section("prefilter")
    models = section.get("models") or list(cfg.models)[:2]
    if len(models) != 2:
        raise ConfigError("[prefilter] models must name exactly two models")
    model_a, model_b = (_model(cfg, m) for m in models)
    corpus = _read_corpus(cfg.out / section.get("input", "corpus.filtered.jsonl"))
    backend = _backend(cfg)
    _manifest(cfg, "prefilter", corpus, extra={"prefilter_models": models})
    relevant, report, records = prefilter_relevance(
        corpus, model_a, model_b, backend,
        transcripts=TranscriptStore(cfg.out / "transcripts"),
        transcript_log=TranscriptLog(cfg.out / "logs" / "prefilter.jsonl"),
    )
    write_corpus(relevant, cfg.out / "corpus.relevant.jsonl")
    write_records(records, cfg.out / "records" / "relevance.jsonl")
    _write(cfg.out / "prefilter_report.json", json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    log.info("prefilter kept %d of %d texts (agreement %s)", len(relevant), len(corpus), report.agreement_rate)


def cmd_classify(cfg: Config) -> None:
    section = cfg.section("classify")
    corpus = _read_corpus(cfg.out / section.get("input", "corpus.relevant.jsonl"))
    cells = _cells(cfg)
    backend = _backend(cfg)
    _manifest(cfg, "classify", corpus, cells)
    transcripts = TranscriptStore(cfg.out / "transcripts")
    tlog = TranscriptLog(cfg.out / "logs" / "classify.jsonl")
    for cell in cells:
        records = run_cell(cell, corpus, backend, transcripts=transcripts, transcript_log=tlog)
        write_records(records, cfg.out / "records" / f"{cell.cell_id}.jsonl")
        failed = sum(not r.outcome.ok for r in records)
        log.info("%s: %d records, %d failures", cell.cell_id, len(records), failed)


def read_label_file(path: Path, coder: str, task: Task) -> LabelVector:
    """CSV with columns unit_id,label. ABSA code tokens are mapped to labels."""
    labels = {}
    with _require(path).open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                unit, value = row["unit_id"].strip(), row["label"].strip()
            except (KeyError, AttributeError):
                raise ConfigError(f"{path}: expected columns unit_id,label") from None
            if value == "":
                continue
            labels[unit] = ABSA_LABELS.get(value, value)
    try:
        return LabelVector(coder, labels, label_domain(task))
    except Exception as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _task_coders(cfg: Config, task: Task):
    humans = []
    for entry in cfg.section("agree").get("human", []):
        if parse_enum(Task, entry["task"]) is task:
            humans.append(read_label_file(cfg.resolve(entry["path"]), entry["coder"], task))
    cells, excluded = [], {}
    transcripts = TranscriptStore(cfg.out / "transcripts")
    for cell in _cells(cfg):
        if cell.task is not task:
            continue
        path = cfg.out / "records" / f"{cell.cell_id}.jsonl"
        records = [r for r in read_records(_require(path), transcripts) if r.instance_index == 0]
        vec, exc = label_vector(records, cell.cell_id, task)
        cells.append((cell, records, vec))
        excluded[cell.cell_id] = exc
    return humans, cells, excluded


def _agree_task(cfg: Config, task: Task) -> None:
    humans, cells, excluded = _task_coders(cfg, task)
    vectors = humans + [vec for _, _, vec in cells]
    if len(vectors) < 2:
        log.warning("%s: fewer than two coders, skipped", task.value)
        return
    matrix = pairwise_matrix(vectors)
    out = cfg.out / "agree"
    slug = task.slug
    _write(out / f"kappa_{slug}.csv", matrix.to_csv("kappa"))
    _write(out / f"observed_{slug}.csv", matrix.to_csv("observed"))
    _write(out / f"n_{slug}.csv", matrix.to_csv("n"))
    _write(out / f"bands_{slug}.csv", matrix.bands_csv())
    title = task.value
    _write(out / f"heatmap_{slug}.svg", emit_heatmap(HeatmapSpec(matrix, "kappa", title=f"Cohen's kappa: {title}")))
    _write(
        out / f"heatmap_observed_{slug}.svg",
        emit_heatmap(HeatmapSpec(matrix, "observed", title=f"Observed agreement: {title}")),
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["coder", "failure", "count"])
    for coder, counts in excluded.items():
        for kind, n in sorted(counts.items()):
            writer.writerow([coder, kind, n])
    _write(out / f"exclusions_{slug}.csv", buf.getvalue())
    if humans:
        corpus_path = cfg.out / cfg.section("classify").get("input", "corpus.relevant.jsonl")
        corpus = _read_corpus(corpus_path) if corpus_path.exists() else None
        records = [r for _, recs, _ in cells for r in recs]
        report = disagreement_report(records, humans[0], corpus)
        _write(out / f"disagreements_{slug}.json", json.dumps(report.to_json(), indent=2, ensure_ascii=False) + "\n")


def cmd_agree(cfg: Config) -> None:
    _manifest(cfg, "agree", None, _cells(cfg))
    _agree_all(cfg)


def _agree_all(cfg: Config) -> None:
    for task in sorted({c.task for c in _cells(cfg)}, key=list(Task).index):
        _agree_task(cfg, task)


def cmd_shares(cfg: Config) -> None:
    _manifest(cfg, "shares", None, _cells(cfg))
    _shares_all(cfg)


def _shares_all(cfg: Config) -> None:
    wanted = cfg.section("shares").get("cells")
    by_task: dict[Task, list] = {}
    for cell in _cells(cfg):
        if wanted and cell.cell_id not in wanted:
            continue
        records = [
            r for r in read_records(_require(cfg.out / "records" / f"{cell.cell_id}.jsonl")) if r.instance_index == 0
        ]
        by_task.setdefault(cell.task, []).append(aggregate_shares(records))
    for task, tables in by_task.items():
        tables = [t for t in tables if t.denominator > 0]
        if not tables:
            continue
        svg, table_csv = emit_share_chart(tables, title=f"Label shares: {task.value}")
        _write(cfg.out / "shares" / f"{task.slug}.svg", svg)
        _write(cfg.out / "shares" / f"{task.slug}.csv", table_csv)


def cmd_reliability(cfg: Config) -> None:
    section = cfg.section("reliability")
    try:
        cell = Cell(
            _model(cfg, section["model"]),
            parse_enum(Strategy, section["strategy"]),
            parse_enum(Task, section["task"]),
        )
    except KeyError as exc:
        raise ConfigError(f"[reliability] missing {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    corpus = _read_corpus(cfg.out / section.get("input", cfg.section("classify").get("input", "corpus.relevant.jsonl")))
    backend = _backend(cfg)
    k = int(section.get("k", 10))
    _manifest(cfg, "reliability", corpus, [cell], extra={"k": k})
    result = run_reliability(
        cell, corpus, backend, k,
        n_resamples=int(section.get("n_resamples", 1000)),
        level=float(section.get("level", 0.95)),
        seed=int(section.get("seed", cfg.seed)),
        transcripts=TranscriptStore(cfg.out / "transcripts"),
        transcript_log=TranscriptLog(cfg.out / "logs" / "reliability.jsonl"),
    )
    out = cfg.out / "reliability"
    write_records([r for run in result.records for r in run], out / f"{cell.cell_id}.records.jsonl")
    _write(out / f"{cell.cell_id}.json", json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n")
    log.info("%s: alpha=%s disagreements=%d", cell.cell_id,
             result.alpha.alpha if result.alpha else result.undefined_reason, len(result.disagreements))


def cmd_report(cfg: Config) -> None:
    _manifest(cfg, "report", None, _cells(cfg))
    _agree_all(cfg)
    _shares_all(cfg)


COMMANDS = {
    "ingest": cmd_ingest,
    "filter": cmd_filter,
    "sample": cmd_sample,
    "prefilter": cmd_prefilter,
    "classify": cmd_classify,
    "agree": cmd_agree,
    "reliability": cmd_reliability,
    "shares": cmd_shares,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kappaforge", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--backend", choices=("live", "mock", "replay"))
    parser.add_argument("--out", type=Path)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args)
        COMMANDS[args.subcommand](cfg)
    except CliError as exc:
        _error(type(exc).__name__, str(exc))
        return exc.exit_code
    except Exception as exc:
        log.debug("unhandled error", exc_info=True)
        _error(type(exc).__name__, str(exc))
        return 1
    return 0


def _error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
