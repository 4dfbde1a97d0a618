import pytest

from kappaforge.agreement import LabelVector
from kappaforge.corpus import Corpus, UserText
from kappaforge.extraction import ExtractionOutcome, FailureKind
from kappaforge.gateway import FlakyBackend, MockBackend, MockRule, ModelConfig, RetryPolicy, TransportError
from kappaforge.prompts import Strategy, Task
from kappaforge.runner import (
    Cell,
    ClassificationRecord,
    EmptyInput,
    RunManifest,
    RunnerError,
    TranscriptStore,
    aggregate_shares,
    disagreement_report,
    label_vector,
    percent,
    prefilter_relevance,
    read_records,
    run_cell,
    run_reliability,
    write_records,
)

from oracles import alpha_pairs

NO_SLEEP = lambda _s: None  # noqa: E731


def corpus_of(*bodies):
    return Corpus.from_texts(UserText(f"u{i:04d}", b, "en", "g") for i, b in enumerate(bodies))


def record(unit, label=None, failure=None, task=Task.GAMBLING_COMPARISON):
    outcome = ExtractionOutcome(label=label, failure=failure)
    return ClassificationRecord(unit, "m", Strategy.ZERO_SHOT, task, 0, outcome, None)


class TestCell:
    def test_cell_id(self):
        cell = Cell(ModelConfig("gpt-4o/mini"), Strategy.CHAIN_OF_THOUGHT, Task.ABSA)
        assert cell.cell_id == "gpt-4o-mini__cot__absa"

    def test_relevance_not_a_cell(self):
        with pytest.raises(RunnerError):
            Cell(ModelConfig("m"), Strategy.ZERO_SHOT, Task.RELEVANCE)


class TestRunCell:
    def test_aligned_records(self, tmp_path):
        backend = MockBackend(rules=[MockRule("Neg_code", body_contains=("scam",))], default="Pos_code")
        corpus = corpus_of("great loot box", "loot box scam", "nice gacha")
        store = TranscriptStore(tmp_path / "t")
        records = run_cell(Cell(ModelConfig("m"), Strategy.ZERO_SHOT, Task.ABSA), corpus, backend, transcripts=store)
        assert [r.unit_id for r in records] == corpus.ids()
        assert [r.outcome.label for r in records] == ["Positive", "Negative", "Positive"]
        assert store.get(records[1].completion_fingerprint) == "Neg_code"

    def test_transport_failure_becomes_unavailable(self):
        class Down:
            kind = "mock"

            def send(self, config, prompt, instance_index):
                raise TransportError("down")

        cfg = ModelConfig("m", retry=RetryPolicy(max_attempts=2))
        records = run_cell(Cell(cfg, Strategy.ZERO_SHOT, Task.ABSA), corpus_of("x"), Down(), sleep=NO_SLEEP)
        assert records[0].outcome.failure is FailureKind.UNAVAILABLE

    def test_empty_corpus(self):
        with pytest.raises(EmptyInput):
            run_cell(Cell(ModelConfig("m"), Strategy.ZERO_SHOT, Task.ABSA), corpus_of(), MockBackend(default="x"))

    def test_records_round_trip(self, tmp_path):
        store = TranscriptStore(tmp_path / "t")
        records = run_cell(Cell(ModelConfig("m"), Strategy.ZERO_SHOT, Task.ABSA), corpus_of("a", "b"),
                           MockBackend(default="I can't assist with that."), transcripts=store)
        path = tmp_path / "r.jsonl"
        write_records(records, path)
        again = read_records(path, store)
        assert again == records
        write_records(again, tmp_path / "r2.jsonl")
        assert path.read_bytes() == (tmp_path / "r2.jsonl").read_bytes()
        assert again[0].outcome.failure is FailureKind.REFUSAL
        assert read_records(path)[0].outcome.raw == ""


class TestLabelVector:
    def test_failures_excluded_and_counted(self):
        records = [record("a", "1"), record("b", failure=FailureKind.REFUSAL), record("c", "0")]
        vec, excluded = label_vector(records, "m")
        assert vec.labels == {"a": "1", "c": "0"}
        assert excluded == {"Refusal": 1}


class TestPrefilter:
    def backend(self):
        return MockBackend(rules=[
            MockRule("Relevance_code: [relevant]", body_contains=("both",)),
            MockRule("Relevance_code: [relevant]", model_id="a", body_contains=("conflict",)),
            MockRule("Relevance_code: [not_relevant]", body_contains=("conflict", "neither")),
            MockRule("I can't assist with that.", model_id="b", body_contains=("refuse",)),
            MockRule("Relevance_code: [not_relevant]", body_contains=("refuse",)),
        ])

    def test_rules(self):
        corpus = corpus_of("both", "conflict", "neither", "refuse")
        kept, report, records = prefilter_relevance(corpus, ModelConfig("a"), ModelConfig("b"), self.backend())
        assert kept.ids() == ["u0000", "u0001", "u0003"]
        assert (report.both_relevant, report.both_not_relevant, report.conflicts) == (1, 1, 1)
        assert report.unresolved == ["u0003"]
        assert report.decisions["u0001"]["status"] == "Conflict"
        assert report.agreement_rate == pytest.approx(2 / 3)
        assert len(records) == 8


class TestReliability:
    def test_deterministic_mock_alpha_one(self):
        backend = MockBackend(rules=[MockRule("Gambling_Mention: [1]", body_contains=("casino",))],
                              default="Gambling_Mention: [0]")
        corpus = corpus_of("like a casino", "fine", "casino vibes", "ok")
        result = run_reliability(Cell(ModelConfig("m"), Strategy.ZERO_SHOT, Task.GAMBLING_COMPARISON), corpus,
                                 backend, k=10, n_resamples=100)
        assert result.alpha.alpha == 1.0
        assert result.disagreements == []
        assert result.alpha.ci.lo == result.alpha.ci.hi == 1.0

    def test_flipped_units_against_oracle(self):
        n, flipped = 1117, set(range(3, 1117, 20))
        assert len(flipped) == 56
        flipped = set(sorted(flipped)[:55])

        class Scripted:
            kind = "mock"

            def send(self, config, prompt, instance_index):
                i = int(prompt.body.split()[-1])
                value = i % 3 == 0
                if i in flipped and instance_index == 7:
                    value = not value
                return f"Payment_Willingness_Mention: [{int(value)}]"

        corpus = corpus_of(*(f"text {i}" for i in range(n)))
        cell = Cell(ModelConfig("m", max_in_flight=8), Strategy.ZERO_SHOT, Task.FINANCIAL_ENGAGEMENT)
        result = run_reliability(cell, corpus, Scripted(), k=10, n_resamples=0)
        assert len(result.disagreements) == 55
        units = []
        for i in range(n):
            base = int(i % 3 == 0)
            units.append([str(base ^ (i in flipped and k == 7)) for k in range(10)])
        assert result.alpha.alpha == pytest.approx(alpha_pairs(units), abs=1e-9)
        assert result.alpha.alpha < 1.0

    def test_k_must_be_two(self):
        with pytest.raises(RunnerError):
            run_reliability(Cell(ModelConfig("m"), Strategy.ZERO_SHOT, Task.ABSA), corpus_of("x"),
                            MockBackend(default="Pos_code"), k=1)

    def test_flaky_backend_same_result(self):
        backend = MockBackend(default="Gambling_Mention: [0]", rules=[
            MockRule("Gambling_Mention: [1]", body_contains=("bet",))])
        flaky = FlakyBackend(backend, 0.2, seed=4, max_consecutive=2)
        corpus = corpus_of("bet", "no", "bet again")
        cell = Cell(ModelConfig("m"), Strategy.ZERO_SHOT, Task.GAMBLING_COMPARISON)
        a = run_reliability(cell, corpus, backend, k=3, n_resamples=0)
        b = run_reliability(cell, corpus, flaky, k=3, n_resamples=0, sleep=NO_SLEEP)
        assert a.to_json() == b.to_json()


class TestShares:
    def test_percent_rounding(self):
        assert percent(176, 1117) == "15.76"
        assert percent(941, 1117) == "84.24"
        assert percent(1, 8) == "12.50"
        assert percent(1, 200) == "0.50"
        assert percent(1, 400) == "0.25"
        assert percent(1, 800) == "0.13"  # 0.125 rounds half up

    def test_aggregate(self):
        records = [record(f"a{i}", "1") for i in range(176)] + [record(f"b{i}", "0") for i in range(941)]
        records.append(record("z", failure=FailureKind.MISSING_CODE))
        table = aggregate_shares(records)
        assert table.denominator == 1117
        assert table.percents == {"0": "84.24", "1": "15.76"}
        assert table.failures == {"MissingCode": 1}

    def test_all_failures(self):
        table = aggregate_shares([record("a", failure=FailureKind.REFUSAL)])
        assert table.percents is None and table.denominator == 0

    def test_empty(self):
        with pytest.raises(EmptyInput):
            aggregate_shares([])


class TestDisagreements:
    def test_groups(self):
        corpus = corpus_of("one", "two", "three", "four")
        records = [
            ClassificationRecord("u0000", "m", Strategy.ZERO_SHOT, Task.ABSA, 0,
                                 ExtractionOutcome(label="Positive", raw="Pos_code"), None),
            ClassificationRecord("u0001", "m", Strategy.ZERO_SHOT, Task.ABSA, 0,
                                 ExtractionOutcome(label="Negative", raw="Neg_code"), None),
            ClassificationRecord("u0002", "m", Strategy.ZERO_SHOT, Task.ABSA, 0,
                                 ExtractionOutcome(failure=FailureKind.REFUSAL, raw="I can't assist"), None),
            ClassificationRecord("u0003", "m", Strategy.ZERO_SHOT, Task.ABSA, 0,
                                 ExtractionOutcome(label="Negative", raw="Neg_code"), None),
        ]
        human = LabelVector("Human1", {"u0000": "Positive", "u0001": "Positive", "u0002": "Neutral",
                                       "u0003": "Positive"})
        report = disagreement_report(records, human, corpus)
        assert len(report) == 3
        assert list(report.groups) == [("Neutral", "Refusal"), ("Positive", "Negative")]
        assert [e.unit_id for e in report.groups[("Positive", "Negative")]] == ["u0001", "u0003"]
        assert report.groups[("Neutral", "Refusal")][0].body == "three"
        assert report.to_json()["n_entries"] == 3


def test_manifest_round_trip(tmp_path):
    m = RunManifest("abc", ["m__zs__absa"], {"m": 0.0}, {"sample": 7}, "mock", command="classify")
    m.write(tmp_path / "manifest.json")
    again = RunManifest.read(tmp_path / "manifest.json")
    assert again == m
    assert "absa__base" in again.template_fingerprints
