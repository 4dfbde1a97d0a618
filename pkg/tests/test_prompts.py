import pytest
from hypothesis import given
from hypothesis import strategies as st

from kappaforge.prompts import (
    CODING_TASKS,
    DEFAULT_PROFILE,
    LLAMA_PROFILE,
    ModelProfile,
    PromptError,
    Strategy,
    Task,
    base_template,
    expected_code_grammar,
    load_segment,
    render_prompt,
)

GOLDEN_BODY = "I bought three loot crates for 5 euros and got {nothing}. ```meh```"
PROFILES = (DEFAULT_PROFILE, LLAMA_PROFILE)
COT_A = "Let's think step by step. Explain your reasoning process carefully before you give your answer."
TOT_LEAD = "Imagine three different experts are collaborating to solve this task."
TOT_CONT = "Proceed to provide the complete analysis without stopping."


@pytest.mark.parametrize("task", CODING_TASKS)
@pytest.mark.parametrize("strategy", list(Strategy))
@pytest.mark.parametrize("profile", PROFILES, ids=lambda p: p.profile_id)
def test_rendered_golden(task, strategy, profile, golden_dir):
    golden = golden_dir / "rendered" / f"{task.slug}__{strategy.short}__{profile.profile_id}.txt"
    rendered = render_prompt(task, strategy, profile, GOLDEN_BODY)
    assert rendered.text.encode("utf-8") == golden.read_bytes()


def test_absa_literals():
    text = base_template(Task.ABSA)
    assert "end your response with 'Pos_code'" in text
    assert text.endswith("Code: []")
    assert text.startswith("As part of a scientific study, your task is to analyze user text")


@pytest.mark.parametrize(
    "task,field",
    [
        (Task.GAMING_EXPERIENCE, "Gaming_Exp_Mention: []"),
        (Task.FINANCIAL_ENGAGEMENT, "Payment_Willingness_Mention: []"),
        (Task.GAMBLING_COMPARISON, "Gambling_Mention: []"),
    ],
)
def test_binary_templates_end_with_field(task, field):
    assert base_template(task).endswith("Code:\n\n" + field)


def test_zero_shot_gambling():
    r = render_prompt(Task.GAMBLING_COMPARISON, Strategy.ZERO_SHOT, DEFAULT_PROFILE, "x")
    assert r.text.startswith("In this scientific analysis, your task is")
    assert r.text.endswith("###\nHere is the text you need to analyze:\n```x```")
    assert r.text == base_template(Task.GAMBLING_COMPARISON) + "\n\n" + load_segment("usertext__block").replace("{USERTEXT}", "x")


def test_cot_additions():
    r = render_prompt(Task.ABSA, Strategy.CHAIN_OF_THOUGHT, DEFAULT_PROFILE, "x")
    assert COT_A in r.text
    assert r.text.endswith("```x```\n\n###\nRemember to think step by step.")
    assert r.text.index(COT_A) < r.text.index("```x```")


def test_tot_with_continuation():
    r = render_prompt(Task.FINANCIAL_ENGAGEMENT, Strategy.THREE_OF_THOUGHT, LLAMA_PROFILE, "x")
    assert r.text.startswith(TOT_LEAD)
    assert TOT_CONT in r.text
    assert "You must give a final answer code at the end of your answer." in r.text
    assert r.text.index("The task is:") < r.text.index("In this scientific analysis")


def test_tot_default_profile_has_no_continuation():
    r = render_prompt(Task.FINANCIAL_ENGAGEMENT, Strategy.THREE_OF_THOUGHT, DEFAULT_PROFILE, "x")
    assert TOT_CONT not in r.text


def test_continuation_only_under_tot():
    zs = render_prompt(Task.ABSA, Strategy.ZERO_SHOT, LLAMA_PROFILE, "x")
    assert zs.text == render_prompt(Task.ABSA, Strategy.ZERO_SHOT, DEFAULT_PROFILE, "x").text


def test_empty_body_rejected():
    with pytest.raises(PromptError):
        render_prompt(Task.ABSA, Strategy.ZERO_SHOT, DEFAULT_PROFILE, "")


def test_unknown_addition():
    with pytest.raises(PromptError):
        ModelProfile("odd", ("persona",))


def test_grammars():
    assert expected_code_grammar(Task.ABSA).tokens == ("Pos_code", "Neg_code", "0_code", "Nomention_code")
    assert expected_code_grammar(Task.GAMBLING_COMPARISON).field == "Gambling_Mention"
    assert expected_code_grammar(Task.FINANCIAL_ENGAGEMENT).field == "Payment_Willingness_Mention"
    assert expected_code_grammar(Task.GAMING_EXPERIENCE).values == ("0", "1")
    assert expected_code_grammar(Task.RELEVANCE).values == ("relevant", "not_relevant")


bodies = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=50).map(
    lambda s: "⁣" + s + "⁤"
)


@given(st.sampled_from(list(Task)), st.sampled_from(list(Strategy)), st.sampled_from(PROFILES), bodies)
def test_render_properties(task, strategy, profile, body):
    r = render_prompt(task, strategy, profile, body)
    assert r == render_prompt(task, strategy, profile, body)
    assert base_template(task) in r.text
    # sentinel characters make the body occurrence unambiguous
    assert r.text.count(body) == 1
    assert f"```{body}```" in r.text
    fence = r.text.index(f"```{body}```")
    instructions = r.text[:fence]
    assert "Here is the text you need to analyze:" in instructions
    if strategy is Strategy.ZERO_SHOT:
        assert r.text == base_template(task) + "\n\n" + f"###\nHere is the text you need to analyze:\n```{body}```"


def test_segments_match_source_document(golden_dir):
    """Base templates are verbatim copies of the prompt listings in the source document."""
    source = golden_dir.parent.parent / "paper.md"
    if not source.exists():
        pytest.skip("source document not present")
    lines = source.read_text(encoding="utf-8").split("\n")
    heads = ["ABSA PROMPT", "GAMING EXPERIENCE PROMPT", "FINANCIAL ENGAGEMENT PROMPT",
             "GAMBLING COMPARISON PROMPT", "COT PROMPT ADDITIONS"]
    for task, head, nxt in zip(CODING_TASKS, heads, heads[1:]):
        i, j = lines.index(head), lines.index(nxt)
        assert base_template(task) == "\n".join(lines[i + 1 : j]).strip("\n")
