"""Training-sample construction, slot-value permutation and export."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

from .complicate import LabeledDialogue
from .llm import atomic_write
from .schema import Schema

SEPARATOR = " | "
NONE_MARKER = "none"
VALUE_KIND = "value-generation"
SLOT_KIND = "domain-slot-generation"
DEFAULT_PERMUTATION_CAP = 720


@dataclass
class TrainingSample:
    dialogue_id: str
    turn_index: int
    history: list[tuple[str, str]]
    current: tuple[str, str]
    target_values: list[str]
    kind: str = VALUE_KIND
    value: str | None = None  # the input value of a domain-slot sample
    none_marker: str = NONE_MARKER
    permutation: int = 0

    @property
    def target_text(self) -> str:
        # an empty turn state still needs a target for the generator
        return SEPARATOR.join(self.target_values) if self.target_values else self.none_marker

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "dialogue_id": self.dialogue_id,
            "turn_index": self.turn_index,
            "kind": self.kind,
            "history": [list(p) for p in self.history],
            "current": list(self.current),
            "target_values": self.target_values,
            "target": self.target_text,
        }
        if self.kind == VALUE_KIND:
            out["permutation"] = self.permutation
        else:
            out["value"] = self.value
        return out


def to_samples(ld: LabeledDialogue, schema: Schema | None = None, none_marker: str = NONE_MARKER) -> list[TrainingSample]:
    """One value sample per turn plus one domain-slot sample per (value, slot) pair."""
    out: list[TrainingSample] = []
    history: list[tuple[str, str]] = []
    for i, turn in enumerate(ld.turns):
        current = (turn.system, turn.user)
        slots = list(turn.turn_state)
        if schema is not None:
            slots.sort(key=schema.slot_rank)
        values = [turn.turn_state[s] for s in slots]
        out.append(TrainingSample(ld.dialogue_id, i, list(history), current, values, none_marker=none_marker))
        for s in slots:
            out.append(TrainingSample(ld.dialogue_id, i, list(history), current, [s], kind=SLOT_KIND,
                                      value=turn.turn_state[s], none_marker=none_marker))
        history.append(current)
    return out


def permute_values(sample: TrainingSample, cap: int = DEFAULT_PERMUTATION_CAP,
                   rng: random.Random | None = None) -> list[TrainingSample]:
    """Every ordering of the target values as its own sample.

    When ``k!`` exceeds ``cap``, ``cap`` distinct orderings are drawn
    uniformly instead. Repeated values yield each distinct ordering once.
    """
    if sample.kind != VALUE_KIND:
        raise ValueError("only value-generation samples are permuted")
    values = sample.target_values
    k = len(values)
    if k <= 1:
        return [replace(sample, permutation=0)]
    if math.factorial(k) <= cap:
        orders = list(dict.fromkeys(itertools.permutations(values)))
    else:
        if rng is None:
            key = f"{sample.dialogue_id}#{sample.turn_index}#{sample.target_text}"
            rng = random.Random(hashlib.sha256(key.encode()).hexdigest())
        distinct = math.factorial(k) // math.prod(math.factorial(c) for c in _counts(values))
        want = min(cap, distinct)
        picked: dict[tuple[str, ...], None] = {}
        while len(picked) < want:
            order = list(values)
            rng.shuffle(order)
            picked.setdefault(tuple(order))
        orders = list(picked)
    return [replace(sample, target_values=list(o), permutation=j) for j, o in enumerate(orders)]


def _counts(values: list[str]) -> list[int]:
    counts: dict[str, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return list(counts.values())


def build_samples(dialogues: Iterable[LabeledDialogue], schema: Schema | None = None, permute: bool = True,
                  cap: int = DEFAULT_PERMUTATION_CAP, none_marker: str = NONE_MARKER) -> list[TrainingSample]:
    out: list[TrainingSample] = []
    for ld in dialogues:
        for s in to_samples(ld, schema, none_marker):
            if permute and s.kind == VALUE_KIND:
                out.extend(permute_values(s, cap))
            else:
                out.append(s)
    return out


@dataclass
class ExportResult:
    files: dict[str, Path]
    counts: dict[str, int]
    manifest: Path
    extra: dict[str, Any] = field(default_factory=dict)


def export_training(samples: Iterable[TrainingSample], out_dir: str | Path, split: str = "train",
                    config_digest: str = "", extra: dict[str, Any] | None = None) -> ExportResult:
    """Write ``<split>-values.jsonl``, ``<split>-domainslots.jsonl`` and ``manifest.json``.

    Output is byte-stable for a fixed input order.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("nothing to export")
    out = Path(out_dir)
    groups = {"values": VALUE_KIND, "domainslots": SLOT_KIND}
    files: dict[str, Path] = {}
    counts: dict[str, int] = {}
    digests: dict[str, str] = {}
    for name, kind in groups.items():
        lines = [json.dumps(s.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for s in samples if s.kind == kind]
        path = out / f"{split}-{name}.jsonl"
        text = "".join(lines)
        atomic_write(path, text)
        files[name] = path
        counts[name] = len(lines)
        digests[path.name] = hashlib.sha256(text.encode("utf-8")).hexdigest()
    counts["total"] = counts["values"] + counts["domainslots"]
    manifest = {
        "split": split,
        "counts": counts,
        "config_digest": config_digest,
        "files": digests,
        **(extra or {}),
    }
    mpath = out / "manifest.json"
    atomic_write(mpath, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ExportResult(files, counts, mpath, extra or {})
