"""Labeled-dialogue assembly and co-reference complication."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from . import prompts
from .dialogue import Dialogue, Flow
from .llm import LLMClient, Stage, extract_json
from .textnorm import Lexicon, value_appears

log = logging.getLogger(__name__)

VARIANTS = ("easy", "difficult")


class AssemblyError(ValueError):
    pass


@dataclass
class LabeledTurn:
    system: str
    user: str
    turn_state: dict[str, str]
    belief_state: dict[str, str]
    coref_slots: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "system": self.system,
            "user": self.user,
            "turn_state": self.turn_state,
            "belief_state": self.belief_state,
            "coref_slots": self.coref_slots,
        }


@dataclass
class LabeledDialogue:
    state_id: str
    turns: list[LabeledTurn]
    variant: str = "easy"
    coref: list[tuple[str, str]] = field(default_factory=list)

    @property
    def flow_id(self) -> str:
        return self.state_id

    @property
    def dialogue_id(self) -> str:
        return f"{self.state_id}:{self.variant}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "dialogue_id": self.dialogue_id,
            "state_id": self.state_id,
            "flow_id": self.flow_id,
            "variant": self.variant,
            "coref": [list(p) for p in self.coref],
            "turns": [t.to_dict() for t in self.turns],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "LabeledDialogue":
        turns = [LabeledTurn(t["system"], t["user"], dict(t["turn_state"]), dict(t["belief_state"]),
                             list(t.get("coref_slots", []))) for t in d["turns"]]
        return cls(d["state_id"], turns, d.get("variant", "easy"), [tuple(p) for p in d.get("coref", [])])


def _coref_flags(states: Sequence[Mapping[str, str]], coref: Iterable[tuple[str, str]]) -> list[list[str]]:
    """Per turn, the coref targets whose source was stated in an earlier turn."""
    first: dict[str, int] = {}
    for i, ts in enumerate(states):
        for k in ts:
            first.setdefault(k, i)
    flags: list[list[str]] = [[] for _ in states]
    for i, ts in enumerate(states):
        for target, source in coref:
            if target in ts and first.get(source, i) < i and target not in flags[i]:
                flags[i].append(target)
    return flags


def assemble_labeled_dialogue(dialogue: Dialogue, flow: Flow,
                              coref: Iterable[tuple[str, str]] = ()) -> LabeledDialogue:
    """Pair agent turn i with user turn i+1 into DST exchanges (the easy variant)."""
    coref = list(coref)
    if len(dialogue.turns) % 2:
        raise AssemblyError(f"{dialogue.dialogue_id}: odd number of turns ({len(dialogue.turns)})")
    if len(dialogue.turns) != len(flow.turns):
        raise AssemblyError(f"{dialogue.dialogue_id}: dialogue and flow lengths differ")
    states: list[dict[str, str]] = []
    texts: list[tuple[str, str]] = []
    for i in range(0, len(dialogue.turns), 2):
        a, u = dialogue.turns[i], dialogue.turns[i + 1]
        if a.role != "agent" or u.role != "user":
            raise AssemblyError(f"{dialogue.dialogue_id}: turn {i} is not an agent/user pair")
        states.append({**flow.turns[i].turn_state, **flow.turns[i + 1].turn_state})
        texts.append((a.content, u.content))
    flags = _coref_flags(states, coref)
    belief: dict[str, str] = {}
    turns = []
    for (sys_text, user_text), ts, fl in zip(texts, states, flags):
        belief = {**belief, **ts}
        turns.append(LabeledTurn(sys_text, user_text, dict(ts), dict(belief), fl))
    return LabeledDialogue(flow.state_id, turns, "easy", coref)


def find_coref_turns(ld: LabeledDialogue, coref: Iterable[tuple[str, str]] | None = None) -> list[int]:
    """Indices of turns holding a coref target whose source was stated earlier."""
    pairs = ld.coref if coref is None else list(coref)
    flags = _coref_flags([t.turn_state for t in ld.turns], pairs)
    return [i for i, f in enumerate(flags) if f]


@dataclass
class ModifiedTurn:
    description: str
    system: str
    user: str


def parse_modified_turn(text: str) -> ModifiedTurn | None:
    try:
        data = extract_json(text)
    except ValueError:
        return None
    if not isinstance(data, dict):
        return None
    system, user = data.get("system"), data.get("user")
    if not isinstance(system, str) or not isinstance(user, str) or not user.strip():
        return None
    return ModifiedTurn(str(data.get("description", "")), system, user)


def complicate_turn(llm: LLMClient, history: Sequence[tuple[str, str]], turn: LabeledTurn,
                    coref_pairs: Mapping[str, str], turn_state: Mapping[str, str] | None = None,
                    decoding=None) -> ModifiedTurn | None:
    """Ask for an implicit rewrite of the coref values; ``None`` keeps the original turn."""
    messages = prompts.complication(history, turn.system, turn.user,
                                    turn.turn_state if turn_state is None else turn_state, coref_pairs)
    mod = parse_modified_turn(llm.chat(Stage.COMPLICATE, messages, decoding))
    if mod is None:
        log.warning("complication response unusable; keeping the original turn")
    return mod


def validate_complication(original: LabeledTurn, modified: ModifiedTurn, coref_targets: Iterable[str],
                          turn_state: Mapping[str, str], lexicon: Lexicon | None = None) -> bool:
    """Every non-coref value must still be explicit in the rewritten exchange."""
    if (modified.system, modified.user) == (original.system, original.user):
        return True
    exempt = set(coref_targets)
    text = f"{modified.system}\n{modified.user}"
    return all(value_appears(text, slot, value, lexicon)
               for slot, value in turn_state.items() if slot not in exempt)


@dataclass
class ComplicationStats:
    candidates: int = 0
    rewritten: int = 0
    unparseable: int = 0
    rejected: int = 0

    def to_dict(self) -> dict[str, int]:
        return dict(vars(self))


def complicate_dialogue(llm: LLMClient, ld: LabeledDialogue, lexicon: Lexicon | None = None,
                        decoding=None) -> tuple[LabeledDialogue, ComplicationStats]:
    """Difficult variant of ``ld``: coref turns rewritten in order, annotations untouched."""
    stats = ComplicationStats()
    turns = [replace(t) for t in ld.turns]
    for i in find_coref_turns(ld):
        stats.candidates += 1
        turn = turns[i]
        pairs = {t: s for t, s in ld.coref if t in turn.coref_slots}
        history = [(t.system, t.user) for t in turns[:i]]
        mod = complicate_turn(llm, history, turn, pairs, turn.turn_state, decoding)
        if mod is None:
            stats.unparseable += 1
            continue
        if not validate_complication(turn, mod, pairs, turn.turn_state, lexicon):
            stats.rejected += 1
            continue
        if (mod.system, mod.user) != (turn.system, turn.user):
            stats.rewritten += 1
        turns[i] = replace(turn, system=mod.system, user=mod.user)
    return LabeledDialogue(ld.state_id, turns, "difficult", list(ld.coref)), stats
