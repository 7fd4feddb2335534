"""Exit criteria for the pipeline, one marked test per criterion.

The terminal summary prints a PASS/FAIL line for each criterion number.
"""

import filecmp
import math
import random
import time
from itertools import combinations

import pytest

from dstaug import pipeline
from dstaug.augment import TrainingSample, permute_values
from dstaug.complicate import LabeledDialogue
from dstaug.dialogue import (
    Dialogue, DialogueTurn, Flow, FlowTurn, generate_dialogue, retention_report, validate_dialogue, validate_flow,
)
from dstaug.llm import LLMClient, ReplayBackend
from dstaug.metrics import PredictionRecord, coref_slot_accuracy, joint_goal_accuracy
from dstaug.planner import DomainCombo, Ref, SeedState, enumerate_combos, filter_seed_state
from dstaug.synth import DependencyCycle, dependency_order, fill_state

from conftest import FIXTURES, load_fixture
from test_metrics import COREF_ANN, COREF_GOLD, COREF_PRED, GOLD, PRED
from test_synth import check_state, fixture_seeds, random_acyclic_seed, respects_edges


# -- 1: domain combinations --------------------------------------------------


@pytest.mark.acceptance(1, "domain combinations")
def test_domain_combinations(schema):
    start = time.perf_counter()
    combos = enumerate_combos(schema.domain_names)
    assert len(combos) == 20 and len({c.id for c in combos}) == 20
    for n in (3, 4, 5, 6):
        names = [f"d{i}" for i in range(n)]
        got = {c.domains for c in enumerate_combos(names)}
        oracle = {tuple(sorted(c)) for k in (2, 3) for c in combinations(names, k)}
        assert got == oracle and len(got) == math.comb(n, 2) + math.comb(n, 3)
    assert time.perf_counter() - start < 1.0


# -- 2: reference filtering rules ---------------------------------------------


def _rule_seed(case):
    return SeedState.from_dict({"seed_id": case["id"], "combo_id": case["combo"], "entries": case["entries"]})


@pytest.mark.acceptance(2, "reference filtering rules")
def test_rule_filter(schema):
    cases = load_fixture("rule_seeds.json")
    assert len(cases) >= 12
    covered = {rule for case in cases for _, _, rules in case["removed"] for rule in rules}
    assert {f"R{i}" for i in range(1, 8)} <= covered
    by_id = {case["id"]: case for case in cases}
    assert ["taxi-leaveat", "restaurant-book time", ["R7"]] in by_id["worked-removed"]["removed"]
    assert by_id["worked-kept"]["entries"]["taxi-arriveby"] == {"ref": "restaurant-book time"}
    assert by_id["worked-kept"]["removed"] == []
    for case in cases:
        result = filter_seed_state(_rule_seed(case), schema)
        got = [[r.target, r.source, sorted(r.rules)] for r in result.removed]
        assert sorted(got) == sorted([t, s, sorted(rules)] for t, s, rules in case["removed"]), case["id"]
        for target, _, _ in case["removed"]:
            assert not isinstance(result.seed.entries.get(target), Ref), case["id"]
        again = filter_seed_state(result.seed, schema)
        assert again.removed == [] and again.seed.entries == result.seed.entries, case["id"]


# -- 3: domain ordering -------------------------------------------------------

CYCLIC = [
    {"restaurant-area": Ref("hotel-area"), "hotel-book day": Ref("restaurant-book day")},
    {"restaurant-area": Ref("hotel-area"), "hotel-name": Ref("taxi-destination"), "taxi-departure": Ref("restaurant-name")},
    {"attraction-area": Ref("restaurant-area"), "restaurant-area": Ref("hotel-area"), "hotel-area": Ref("attraction-area")},
]


@pytest.mark.acceptance(3, "dependency ordering")
def test_dependency_ordering(schema):
    start = time.perf_counter()
    for i in range(200):
        seed = random_acyclic_seed(schema, random.Random(i))
        assert respects_edges(dependency_order(seed), seed), i
    for entries in CYCLIC:
        domains = tuple(sorted({k.split("-")[0] for k in entries}))
        with pytest.raises(DependencyCycle):
            dependency_order(SeedState("cyc", DomainCombo(domains), entries))
    assert time.perf_counter() - start < 5.0


# -- 4: state synthesis -------------------------------------------------------


@pytest.mark.acceptance(4, "state synthesis invariants")
def test_state_synthesis(schema, db):
    seeds = fixture_seeds(schema)
    for i in range(500):
        seed = seeds[i % len(seeds)]
        state = fill_state(seed, schema, db, random.Random(i))
        assert check_state(state, seed, schema, db) == [], (seed.seed_id, i)
        if i < 50:
            twin = fill_state(seed, schema, db, random.Random(i))
            assert (twin.entries, twin.entities, twin.coref) == (state.entries, state.entities, state.coref)


# -- 5: flow and dialogue gates -----------------------------------------------

STATE = {
    "restaurant-area": "centre", "restaurant-food": "british", "restaurant-book people": "1",
    "restaurant-pricerange": "expensive", "restaurant-name": "midsummer house restaurant",
    "taxi-destination": "midsummer house restaurant", "taxi-arriveby": "12:30",
}
ASK = {k: STATE[k] for k in ("restaurant-area", "restaurant-food", "restaurant-book people", "restaurant-pricerange")}
CONFIRM = {k: STATE[k] for k in ("restaurant-name", "taxi-destination", "taxi-arriveby")}
SIX = dict(list(STATE.items())[:6])

A, U = "agent", "user"


def flow(*turns):
    return Flow("case", [FlowTurn(role, "", dict(ts)) for role, ts in turns])


WORKED = flow((A, {}), (U, ASK), (A, {}), (U, CONFIRM))
WORKED_TEXT = [
    "Hello! How can I help you today?",
    "I'd like to book a table for one at a high-end British cuisine restaurant in the city center.",
    "Midsummer House Restaurant is an excellent choice. Shall I book it for you?",
    "That sounds wonderful. Please confirm my booking at Midsummer House Restaurant. "
    "Also, I need a taxi to get there and arrive by 12:30 PM.",
]

FLOW_CASES = {
    "worked example": (WORKED, STATE, set()),
    "empty": (flow(), STATE, {("empty", None)}),
    "first turn by user": (flow((U, ASK), (A, {}), (U, CONFIRM)), STATE, {("first-not-agent", 0)}),
    "last turn by agent": (flow((A, {}), (U, ASK), (A, {}), (U, CONFIRM), (A, {})), STATE, {("last-not-user", 4)}),
    "two user turns in a row": (flow((A, {}), (U, ASK), (U, CONFIRM)), STATE, {("not-alternating", 2)}),
    "unknown role": (flow((A, {}), (U, ASK), ("system", {}), (U, CONFIRM)), STATE, {("bad-role", 2)}),
    "seven new slots": (flow((A, {}), (U, STATE)), STATE, {("too-many-new", 1)}),
    "six new slots": (flow((A, {}), (U, SIX)), SIX, set()),
    "repeat is not new": (
        flow((A, {}), (U, {"restaurant-area": "centre"}), (A, {}), (U, STATE)), STATE, set()),
    "slot outside the state": (
        flow((A, {}), (U, ASK), (A, {}), (U, {**CONFIRM, "hotel-area": "north"})), STATE, {("extra-slot", 3)}),
    "wrong value": (
        flow((A, {}), (U, {**ASK, "restaurant-area": "north"}), (A, {}), (U, CONFIRM)), STATE, {("value-mismatch", 1)}),
    "slot never stated": (
        flow((A, {}), (U, ASK), (A, {}), (U, {k: v for k, v in CONFIRM.items() if k != "taxi-arriveby"})),
        STATE, {("missing-slot", None)}),
    "agent states seven": (flow((A, STATE), (U, {})), STATE, set()),
    "case and article": (
        flow((A, {}), (U, {**ASK, "restaurant-area": "The Centre"}), (A, {}), (U, CONFIRM)), STATE, set()),
}


def dialogue(texts, roles=None):
    roles = roles or [A, U] * (len(texts) // 2 + 1)
    return Dialogue("case", [DialogueTurn(r, "", t) for r, t in zip(roles, texts)])


VARIANT_FLOW = flow((A, {}), (U, {"restaurant-area": "centre", "restaurant-book people": "2",
                                  "restaurant-book time": "17:00", "restaurant-pricerange": "moderate"}))

DIALOGUE_CASES = {
    "worked example text": (WORKED, WORKED_TEXT, None, set()),
    "turn missing": (WORKED, WORKED_TEXT[:3], None, {("turn-count", None)}),
    "wrong speaker": (WORKED, WORKED_TEXT, [A, A, A, U], {("role-mismatch", 1)}),
    "value not said": (WORKED, [WORKED_TEXT[0], "A table for one, high-end, in the city center.", *WORKED_TEXT[2:]],
                       None, {("missing-value", 1)}),
    "surface variants": (VARIANT_FLOW, ["Hi!", "Somewhere downtown, moderately priced, for two people at 5 pm."],
                         None, set()),
    "negated boolean": (flow((A, {}), (U, {"hotel-parking": "yes"})), ["Hi!", "I do not need parking."],
                        None, {("missing-value", 1)}),
    "dontcare said": (flow((A, {}), (U, {"hotel-area": "dontcare", "hotel-internet": "yes"})),
                      ["Hi!", "Any area is fine, but I need wifi."], None, set()),
}


def _codes(violations):
    return {(v.code, v.turn) for v in violations}


@pytest.mark.acceptance(5, "flow and dialogue validation")
def test_flow_and_dialogue_gates():
    assert len(FLOW_CASES) + len(DIALOGUE_CASES) >= 20
    for name, (f, state, expected) in FLOW_CASES.items():
        assert _codes(validate_flow(f, state)) == expected, name
    for name, (f, texts, roles, expected) in DIALOGUE_CASES.items():
        check = validate_dialogue(dialogue(texts, roles), f)
        assert _codes(check.reasons) == expected, name
        assert check.retained == (not expected), name

    # replayed batch with one planted failure
    llm = LLMClient(ReplayBackend(FIXTURES / "retention.cassette.jsonl"))
    batch = load_fixture("retention_batch.jsonl")
    checks = []
    for rec in batch:
        f = Flow.from_dict(rec["flow"])
        check = validate_dialogue(generate_dialogue(llm, f, rec["db_info"]), f)
        assert check.retained != rec["planted_failure"], f.flow_id
        checks.append(check)
    report = retention_report(checks).to_dict()
    assert (report["generated"], report["retained"], report["deleted"]) == (24, 23, 1)
    assert report["percent"] == 95.8


# -- 6: value permutations ----------------------------------------------------


@pytest.mark.acceptance(6, "value permutations")
def test_value_permutations():
    start = time.perf_counter()
    for k in range(6):
        values = [f"value {i}" for i in range(k)]
        out = permute_values(TrainingSample("d", 0, [], ("s", "u"), values))
        assert len(out) == max(1, math.factorial(k))
        assert len({tuple(s.target_values) for s in out}) == len(out)
    pair = permute_values(TrainingSample("d", 0, [], ("s", "u"), ["Chinese", "centre"]))
    assert sorted(s.target_text for s in pair) == ["Chinese | centre", "centre | Chinese"]
    assert len(permute_values(TrainingSample("d", 0, [], ("s", "u"), ["a", "b", "c"]))) == 6
    assert time.perf_counter() - start < 1.0


# -- 7: metrics ---------------------------------------------------------------


@pytest.mark.acceptance(7, "evaluation metrics")
def test_metrics():
    assert joint_goal_accuracy(PRED, GOLD) == 0.75
    same = [PredictionRecord(d, t, b) for (d, t), b in GOLD.items()]
    assert joint_goal_accuracy(same, GOLD) == 1.0
    rng = random.Random(7)
    for _ in range(20):
        shuffled = [PredictionRecord(p.dialogue_id, p.turn_index,
                                     dict(rng.sample(list(p.predicted_belief.items()), len(p.predicted_belief))))
                    for p in rng.sample(PRED, len(PRED))]
        assert joint_goal_accuracy(shuffled, GOLD) == 0.75
    assert coref_slot_accuracy(COREF_PRED, COREF_GOLD, COREF_ANN) == 0.6


# -- 8: end-to-end reproducibility --------------------------------------------


def _tree(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file() and "cache" not in p.relative_to(root).parts)


@pytest.mark.acceptance(8, "end-to-end reproducibility")
def test_end_to_end_reproducible(tmp_path):
    start = time.perf_counter()
    outs = []
    for name, workers in (("a", 4), ("b", 1)):
        cfg = pipeline.load_config(FIXTURES / "e2e_config.json", output_dir=str(tmp_path / name), workers=workers)
        assert cfg.backend == "replay"
        outs.append(pipeline.run_all(cfg))
    a, b = outs
    files = _tree(a)
    assert files == _tree(b)
    for name in ("labeled.jsonl", "train-values.jsonl", "train-domainslots.jsonl", "manifest.json"):
        assert a / name in [a / f for f in files]
    mismatched = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    assert mismatched == []

    labeled = [LabeledDialogue.from_dict(r) for r in pipeline.read_jsonl(a / "labeled.jsonl")]
    by_id = {ld.dialogue_id: ld for ld in labeled}
    pairs = 0
    for hard in (ld for ld in labeled if ld.variant == "difficult"):
        easy = by_id[hard.dialogue_id.rsplit(":", 1)[0] + ":easy"]
        assert len(easy.turns) == len(hard.turns)
        for e, h in zip(easy.turns, hard.turns):
            assert (e.turn_state, e.belief_state, e.coref_slots) == (h.turn_state, h.belief_state, h.coref_slots)
        if any(e.user != h.user for e, h in zip(easy.turns, hard.turns)):
            pairs += 1
    assert pairs >= 1
    assert time.perf_counter() - start < 60.0
