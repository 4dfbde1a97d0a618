"""Regenerate the demo mock script and human label files.

The outputs are committed; rerun only after editing the rules below.
"""

import csv
import json

MODELS = ("model-a", "model-b")
STRATEGIES = ("zs", "cot", "tot")

ABSA_NEG = ["ruined", "hate", "rigged", "abzocke", "predatory", "hasse", "gambling", "glücksspiel", "casino", "regret", "nervt", "unfair", "destroyed"]
ABSA_POS = ["love", "satisfying", "worth it", "fair", "spaß", "best part", "exciting", "happy", "generous", "mag die"]
ABSA_NEU = ["okay", "neutral", "whatever", "random", "fine", "stört mich nicht", "kosmetisch", "don't affect"]
GAMING = ["balance", "gameplay", "immersion", "compete", "unfair", "pay to win"]
MONEY = ["spent", "paid", "bought", "ausgegeben", "gesteckt", "salary", "$"]
GAMBLE = ["gambling", "casino", "slot machine", "glücksspiel", "spielautomaten"]

ELECTION = (
    "The 2014 U.S. midterm elections were held on November 4, 2014. Republicans gained control "
    "of the Senate and expanded their majority in the House of Representatives, shaping the "
    "final two years of the Obama administration."
)
CRISIS = (
    "I'm really sorry you're feeling this way. If you are in crisis, please reach out to a "
    "local crisis hotline or emergency services right away. You don't have to go through this alone."
)


def absa(token, strategy):
    if strategy == "zs":
        return f"The text expresses a view on the mechanic.\nCode: {token}"
    if strategy == "cot":
        return (
            "Step 1: Identify whether lootbox-like concepts are mentioned. They are.\n"
            "Step 2: At first glance one could argue for Pos_code, but the wording needs care.\n"
            "Step 3: Weigh the tone of the statements about the mechanic.\n"
            f"Final Code: {token}"
        )
    return (
        "Expert 1: The mechanic is mentioned; I lean Neg_code (likelihood 0.5).\n"
        "Expert 2: I read the tone differently (likelihood 0.6).\n"
        "Expert 3: Agreeing with Expert 2 after reflection.\n"
        f"Consensus solution reached.\nCode: [{token}]"
    )


def binary(field, value, strategy):
    other = 1 - value
    if strategy == "zs":
        return f"Code:\n{field}: [{value}]"
    if strategy == "cot":
        return (
            f"Let's think step by step. A naive reading would give {field}: [{other}].\n"
            "However, the explicit statements in the text decide the question.\n"
            f"Code:\n{field}: [{value}]"
        )
    return (
        f"Expert 1: {field}: {other} seems possible (likelihood 0.4).\n"
        f"Expert 2: I disagree, it should be {value} (likelihood 0.8).\n"
        "Expert 3: Expert 2 is right; Expert 1 leaves the group.\n"
        f"Code:\n**{field}:** {value}"
    )


rules = [
    {"model_id": "model-a", "body_contains": ["skyskysky"], "response": ELECTION},
    {"model_id": "model-b", "body_contains": ["i want to die"], "response": CRISIS},
    # relevance pre-filter
    {"task": "relevance", "body_contains": ["nothing about loot"], "response": "Relevance_code: [not_relevant]"},
    {"task": "relevance", "model_id": "model-b", "body_contains": ["don't affect gameplay"], "response": "Relevance_code: [not_relevant]"},
    {"task": "relevance", "response": "The text discusses such mechanics.\nRelevance_code: [relevant]"},
]

for model in MODELS:
    for strategy in STRATEGIES:
        # model/strategy quirks keep the coder matrix non-trivial
        neg, pos, neu = list(ABSA_NEG), list(ABSA_POS), list(ABSA_NEU)
        if model == "model-b" and strategy == "zs":
            pos.append("okay")
            neu.remove("okay")
        if model == "model-a" and strategy == "cot":
            neu.remove("random")
        for words, tok in ((neg, "Neg_code"), (pos, "Pos_code"), (neu, "0_code")):
            rules.append({"task": "absa", "model_id": model, "strategy": strategy, "body_contains": words, "response": absa(tok, strategy)})
        rules.append({"task": "absa", "model_id": model, "strategy": strategy, "response": absa("Nomention_code", strategy)})

        gaming = ["balance"] if (model, strategy) == ("model-b", "zs") else GAMING
        money = [w for w in MONEY if w != "bought"] if (model, strategy) == ("model-b", "cot") else MONEY
        gamble = GAMBLE + ["addictive"] if (model, strategy) == ("model-a", "tot") else GAMBLE
        for task, field, words in (
            ("gaming_experience", "Gaming_Exp_Mention", gaming),
            ("financial_engagement", "Payment_Willingness_Mention", money),
            ("gambling_comparison", "Gambling_Mention", gamble),
        ):
            rules.append({"task": task, "model_id": model, "strategy": strategy, "body_contains": words, "response": binary(field, 1, strategy)})
            rules.append({"task": task, "model_id": model, "strategy": strategy, "response": binary(field, 0, strategy)})

with open("mock_script.json", "w", encoding="utf-8") as fh:
    json.dump({"rules": rules}, fh, indent=1, ensure_ascii=False)
    fh.write("\n")


def has(body, words):
    b = body.casefold()
    return any(w in b for w in words)


def human_absa(body, coder):
    if has(body, ABSA_NEG):
        return "Neg_code"
    if has(body, ABSA_POS):
        return "Pos_code"
    if has(body, ABSA_NEU + (["random"] if coder == 1 else [])):
        return "0_code"
    return "Nomention_code"


# Deliberate coder idiosyncrasies: (coder, task) -> {unit: label}
OVERRIDES = {
    (1, "absa"): {"r11": "Pos_code", "r27": "0_code", "r34": "Neg_code"},
    (2, "absa"): {"r02": "0_code", "r14": "0_code", "r39": "Neg_code", "r22": "Nomention_code"},
    (1, "gaming_experience"): {"r28": 0, "r01": 0},
    (2, "gaming_experience"): {"r12": 0, "r31": 1, "r25": 1},
    (1, "financial_engagement"): {"r30": 0},
    (2, "financial_engagement"): {"r35": 0},
    (1, "gambling_comparison"): {"r10": 0},
    (2, "gambling_comparison"): {"r18": 0, "r37": 1},
}

texts = [json.loads(line) for line in open("corpus.jsonl", encoding="utf-8")]
# Humans code the keyword-filtered texts.
texts = [t for t in texts if t["language"] in ("en", "de") and t["id"] not in ("r08", "r33")]
for coder in (1, 2):
    for task in ("absa", "gaming_experience", "financial_engagement", "gambling_comparison"):
        with open(f"human{coder}_{task}.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit_id", "label"])
            for t in texts:
                body = t["body"]
                if task == "absa":
                    label = human_absa(body, coder)
                elif task == "gaming_experience":
                    label = int(has(body, GAMING + (["gameplay"] if coder == 1 else ["story"])))
                elif task == "financial_engagement":
                    label = int(has(body, MONEY if coder == 1 else MONEY + ["premium"]))
                else:
                    label = int(has(body, GAMBLE + (["addictive"] if coder == 2 else [])))
                label = OVERRIDES.get((coder, task), {}).get(t["id"], label)
                w.writerow([t["id"], label])
