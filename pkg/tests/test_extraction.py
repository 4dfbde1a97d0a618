import pytest
from hypothesis import given
from hypothesis import strategies as st

from kappaforge.extraction import (
    ExtractionConfig,
    ExtractionOutcome,
    FailureKind,
    detect_refusal,
    extract,
    extract_absa,
    extract_binary,
    is_offtask,
    load_refusal_phrases,
)
from kappaforge.prompts import Task, parse_enum

from fixtures.transcripts import CASES

OFFTASK = ExtractionConfig(detect_offtask=True)


def run_case(task_slug, response, input_text):
    task = parse_enum(Task, task_slug)
    config = OFFTASK if input_text is not None else ExtractionConfig()
    return extract(task, response, config, input_text)


def test_corpus_size():
    assert len(CASES) >= 30
    assert len({c[0] for c in CASES}) == len(CASES)


@pytest.mark.parametrize("case_id,task,response,expected,input_text", CASES, ids=[c[0] for c in CASES])
def test_transcript(case_id, task, response, expected, input_text):
    outcome = run_case(task, response, input_text)
    assert outcome.describe() == expected
    assert outcome.raw == response


def test_last_occurrence_wins():
    assert extract_absa("Pos_code ... Neg_code").label == "Negative"
    assert extract_absa("Neg_code ... Pos_code").label == "Positive"
    assert extract_binary("Gambling_Mention", "Gambling_Mention: [1] then Gambling_Mention: [0]").label == "0"


def test_conflicting_kind_unused_by_last_rule():
    # with last-occurrence-wins, several codes never produce ConflictingCodes
    assert extract_absa("Pos_code Neg_code 0_code").ok


def test_offtask_off_by_default():
    essay = next(c for c in CASES if c[0] == "offtask-essay")
    assert extract(Task.FINANCIAL_ENGAGEMENT, essay[2], input_text=essay[4]).failure is FailureKind.MISSING_CODE


def test_offtask_threshold():
    assert is_offtask("alpha bravo charlie delta", "nothing shared here")
    assert not is_offtask("loot boxes again", "more loot boxes please")
    assert not is_offtask("", "anything")


def test_custom_refusal_phrases():
    phrases = load_refusal_phrases("# comment\n\nnope nope\n")
    assert phrases == ("nope nope",)
    assert detect_refusal("Nope nope, not doing it", phrases)
    assert not detect_refusal("I can't assist", phrases)


def test_refusal_detection_can_be_disabled():
    cfg = ExtractionConfig(detect_refusal=False)
    assert extract(Task.ABSA, "I can't assist with that.", cfg).failure is FailureKind.MISSING_CODE


def test_outcome_requires_exactly_one():
    with pytest.raises(ValueError):
        ExtractionOutcome()
    with pytest.raises(ValueError):
        ExtractionOutcome(label="1", failure=FailureKind.REFUSAL)


def test_unknown_field():
    with pytest.raises(ValueError):
        extract_binary("Nope_field", "Nope_field: 1")


@given(st.text())
def test_total(response):
    for task in Task:
        outcome = extract(task, response, OFFTASK, input_text="loot box text")
        assert (outcome.label is None) != (outcome.failure is None)


@given(st.text(), st.sampled_from(["Pos_code", "Neg_code", "0_code", "Nomention_code"]))
def test_trailing_code_wins(prefix, token):
    outcome = extract_absa(prefix + "\n" + token)
    expected = {"Pos_code": "Positive", "Neg_code": "Negative", "0_code": "Neutral", "Nomention_code": "NoMention"}
    assert outcome.label == expected[token]


@given(st.text(), st.sampled_from(["0", "1"]))
def test_trailing_field_wins(prefix, value):
    outcome = extract_binary("Gaming_Exp_Mention", prefix + f"\nGaming_Exp_Mention: [{value}]")
    assert outcome.label == value
