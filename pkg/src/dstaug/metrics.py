"""Joint goal accuracy and co-reference slot accuracy."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .complicate import LabeledDialogue, find_coref_turns
from .textnorm import normalize

Key = tuple[str, int]
EMPTY_VALUES = {"", "none"}


@dataclass(frozen=True)
class PredictionRecord:
    dialogue_id: str
    turn_index: int
    predicted_belief: dict[str, str]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PredictionRecord":
        return cls(str(d["dialogue_id"]), int(d["turn_index"]), dict(d.get("predicted_belief") or {}))


@dataclass(frozen=True)
class CorefAnnotation:
    dialogue_id: str
    turn_index: int
    slot: str

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CorefAnnotation":
        return cls(str(d["dialogue_id"]), int(d["turn_index"]), str(d["slot"]))


def canonical_belief(belief: Mapping[str, str]) -> dict[str, str]:
    """Normalized slot->value map; ``none``/empty values count as absent."""
    out = {}
    for k, v in belief.items():
        val = normalize(v)
        if val not in EMPTY_VALUES:
            out[str(k).strip().lower()] = val
    return out


def index_predictions(preds: Iterable[PredictionRecord]) -> dict[Key, dict[str, str]]:
    out: dict[Key, dict[str, str]] = {}
    for p in preds:
        key = (p.dialogue_id, p.turn_index)
        if key in out:
            raise ValueError(f"duplicate prediction for {key}")
        out[key] = canonical_belief(p.predicted_belief)
    return out


def gold_beliefs(dialogues: Iterable[LabeledDialogue]) -> dict[Key, dict[str, str]]:
    return {(ld.dialogue_id, i): dict(t.belief_state) for ld in dialogues for i, t in enumerate(ld.turns)}


def coref_annotations(dialogues: Iterable[LabeledDialogue]) -> list[CorefAnnotation]:
    """Annotations for every coref target stated after its source."""
    out = []
    for ld in dialogues:
        for i in find_coref_turns(ld):
            for slot in ld.turns[i].coref_slots:
                out.append(CorefAnnotation(ld.dialogue_id, i, slot))
    return out


@dataclass
class JGAResult:
    correct: int
    total: int
    missing: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


def score_jga(preds: Iterable[PredictionRecord], golds: Mapping[Key, Mapping[str, str]]) -> JGAResult:
    pred_map = index_predictions(preds)
    correct = missing = 0
    for key, gold in golds.items():
        if key not in pred_map:
            missing += 1
            continue
        if pred_map[key] == canonical_belief(gold):
            correct += 1
    return JGAResult(correct, len(golds), missing)


def joint_goal_accuracy(preds: Iterable[PredictionRecord], golds: Mapping[Key, Mapping[str, str]]) -> float:
    """Fraction of gold turns whose whole predicted belief equals gold; missing turns are wrong."""
    return score_jga(preds, golds).accuracy


@dataclass
class CorefResult:
    correct: int
    total: int
    first_correct: int
    first_total: int

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.total if self.total else None

    @property
    def first_accuracy(self) -> float | None:
        return self.first_correct / self.first_total if self.first_total else None


def score_coref(preds: Iterable[PredictionRecord], golds: Mapping[Key, Mapping[str, str]],
                annotations: Iterable[CorefAnnotation]) -> CorefResult:
    pred_map = index_predictions(preds)
    correct = total = first_correct = first_total = 0
    seen: set[tuple[str, str]] = set()
    for ann in sorted(set(annotations), key=lambda a: (a.dialogue_id, a.turn_index, a.slot)):
        key = (ann.dialogue_id, ann.turn_index)
        if key not in golds:
            raise KeyError(f"annotation refers to missing gold turn {key}")
        gold = canonical_belief(golds[key]).get(ann.slot.strip().lower())
        ok = gold is not None and pred_map.get(key, {}).get(ann.slot.strip().lower()) == gold
        total += 1
        correct += ok
        if (ann.dialogue_id, ann.slot) not in seen:
            seen.add((ann.dialogue_id, ann.slot))
            first_total += 1
            first_correct += ok
    return CorefResult(correct, total, first_correct, first_total)


def coref_slot_accuracy(preds: Iterable[PredictionRecord], golds: Mapping[Key, Mapping[str, str]],
                        annotations: Iterable[CorefAnnotation]) -> float | None:
    """Share of annotated (turn, slot) pairs predicted correctly; ``None`` when nothing is annotated."""
    return score_coref(preds, golds, annotations).accuracy


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def evaluate_files(gold_path: str | Path, pred_path: str | Path,
                   annotations_path: str | Path | None = None) -> dict[str, Any]:
    dialogues = [LabeledDialogue.from_dict(d) for d in read_jsonl(gold_path)]
    preds = [PredictionRecord.from_dict(d) for d in read_jsonl(pred_path)]
    if annotations_path:
        anns = [CorefAnnotation.from_dict(d) for d in read_jsonl(annotations_path)]
    else:
        anns = coref_annotations(dialogues)
    golds = gold_beliefs(dialogues)
    jga = score_jga(preds, golds)
    coref = score_coref(preds, golds, anns)
    return {
        "jga": jga.accuracy,
        "coref_acc": coref.accuracy,
        "coref_acc_first_mention": coref.first_accuracy,
        "counts": {
            "turns": jga.total,
            "correct_turns": jga.correct,
            "missing_predictions": jga.missing,
            "coref_pairs": coref.total,
            "coref_correct": coref.correct,
            "coref_first_mentions": coref.first_total,
        },
    }
