"""User goal, flow planning, dialogue generation and the retention gate."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from . import prompts
from .llm import LLMClient, Stage, extract_json
from .schema import Schema
from .synth import DialogueState
from .textnorm import Lexicon, mentions, normalize, value_appears

log = logging.getLogger(__name__)

MAX_NEW_PER_USER_TURN = 6
ROLES = ("agent", "user")


class GenerationError(RuntimeError):
    pass


# -- user goal ---------------------------------------------------------------


@dataclass
class UserGoal:
    state_id: str
    text: str

    def to_dict(self) -> dict[str, Any]:
        return {"state_id": self.state_id, "text": self.text}


def recommended_names(state: Mapping[str, str]) -> list[str]:
    """Entity names the agent is supposed to propose (values of ``*-name`` slots)."""
    names = [v for k, v in state.items() if k.endswith("-name") and normalize(v) not in ("", "dontcare")]
    return list(dict.fromkeys(names))


def leaked_names(text: str, state: Mapping[str, str]) -> list[str]:
    return [n for n in recommended_names(state) if mentions(text, n)]


def _clean_goal(text: str) -> str:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] == '"':
        text = text[1:-1].strip()
    return text


def generate_user_goal(llm: LLMClient, state: DialogueState, decoding=None) -> UserGoal:
    """Ask for a goal; a goal naming a recommended entity is regenerated once, then rejected."""
    messages = prompts.user_goal(state.entries)
    text = _clean_goal(llm.chat(Stage.GOAL, messages, decoding))
    if not text:
        raise GenerationError("empty user goal")
    leaks = leaked_names(text, state.entries)
    if leaks:
        log.info("goal for %s names %s; asking again", state.state_id, leaks)
        retry = prompts.user_goal_retry(messages, text, leaks)
        text = _clean_goal(llm.chat(Stage.GOAL, retry, decoding))
        leaks = leaked_names(text, state.entries)
        if not text or leaks:
            raise GenerationError(f"user goal leaks entity names {leaks}")
    return UserGoal(state.state_id, text)


# -- flow --------------------------------------------------------------------


@dataclass
class FlowTurn:
    role: str
    description: str
    turn_state: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "description": self.description, "turn state": self.turn_state}


@dataclass
class Flow:
    state_id: str
    turns: list[FlowTurn]

    @property
    def flow_id(self) -> str:
        return self.state_id

    def to_dict(self) -> dict[str, Any]:
        return {"flow_id": self.flow_id, "state_id": self.state_id, "turns": [t.to_dict() for t in self.turns]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Flow":
        return cls(d["state_id"], [FlowTurn(t["role"], t.get("description", ""), dict(t.get("turn state", {})))
                                   for t in d["turns"]])


def parse_flow(text: str, state_id: str, schema: Schema | None = None) -> Flow | None:
    try:
        data = extract_json(text)
    except ValueError:
        return None
    if not isinstance(data, list) or not data:
        return None
    turns = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            return None
        ts = item.get("turn state", item.get("turn_state", item.get("state", {})))
        if ts is None:
            ts = {}
        if not isinstance(ts, dict):
            return None
        role = str(item.get("role", ROLES[i % 2])).strip().lower()
        if role == "system":
            role = "agent"
        state = {}
        for k, v in ts.items():
            key = (schema.resolve(k) if schema else None) or str(k).strip().lower()
            state[key] = str(v)
        turns.append(FlowTurn(role, str(item.get("description", "")).strip(), state))
    return Flow(state_id, turns)


def plan_flow(llm: LLMClient, state: DialogueState, goal: UserGoal, db_info: Mapping[str, Any] | None = None,
              schema: Schema | None = None, decoding=None) -> Flow:
    db_info = state.entities if db_info is None else db_info
    messages = prompts.dialogue_flow(state.entries, goal.text, db_info)
    text = llm.chat(Stage.FLOW, messages, decoding)
    flow = parse_flow(text, state.state_id, schema)
    if flow is None:
        text = llm.chat(Stage.FLOW, prompts.parse_retry(messages, text, "the JSON list of flow turns"), decoding)
        flow = parse_flow(text, state.state_id, schema)
    if flow is None:
        raise GenerationError("flow response could not be parsed")
    return flow


@dataclass(frozen=True)
class Violation:
    code: str
    turn: int | None = None
    detail: str = ""

    def __str__(self) -> str:
        where = "" if self.turn is None else f" @turn {self.turn}"
        return f"{self.code}{where}: {self.detail}" if self.detail else f"{self.code}{where}"


def validate_flow(flow: Flow, state: Mapping[str, str] | DialogueState) -> list[Violation]:
    """Structural and coverage checks on a flow; an empty list means valid."""
    entries = state.entries if isinstance(state, DialogueState) else dict(state)
    out: list[Violation] = []
    turns = flow.turns
    if not turns:
        return [Violation("empty")]
    if turns[0].role != "agent":
        out.append(Violation("first-not-agent", 0))
    if turns[-1].role != "user":
        out.append(Violation("last-not-user", len(turns) - 1))
    for i, t in enumerate(turns):
        if t.role not in ROLES:
            out.append(Violation("bad-role", i, t.role))
        elif i and t.role == turns[i - 1].role:
            out.append(Violation("not-alternating", i))

    seen: set[str] = set()
    for i, t in enumerate(turns):
        new = [k for k in t.turn_state if k not in seen]
        if t.role == "user" and len(new) > MAX_NEW_PER_USER_TURN:
            out.append(Violation("too-many-new", i, f"{len(new)} new slots"))
        for k, v in t.turn_state.items():
            if k not in entries:
                out.append(Violation("extra-slot", i, k))
            elif normalize(v) != normalize(entries[k]):
                out.append(Violation("value-mismatch", i, f"{k}={v!r}, state has {entries[k]!r}"))
        seen.update(t.turn_state)
    for k in entries:
        if k not in seen:
            out.append(Violation("missing-slot", None, k))
    return out


# -- dialogue ----------------------------------------------------------------


@dataclass
class DialogueTurn:
    role: str
    description: str
    content: str


@dataclass
class Dialogue:
    flow_id: str
    turns: list[DialogueTurn]

    @property
    def dialogue_id(self) -> str:
        return self.flow_id

    def to_dict(self) -> dict[str, Any]:
        return {
            "dialogue_id": self.dialogue_id,
            "flow_id": self.flow_id,
            "turns": [{"role": t.role, "description": t.description, "content": t.content} for t in self.turns],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Dialogue":
        return cls(d["flow_id"], [DialogueTurn(t["role"], t.get("description", ""), t["content"]) for t in d["turns"]])


def parse_dialogue(text: str, flow_id: str) -> Dialogue | None:
    try:
        data = extract_json(text)
    except ValueError:
        return None
    if not isinstance(data, list) or not data:
        return None
    turns = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            return None
        content = item.get("content", item.get("utterance"))
        if not isinstance(content, str):
            return None
        role = str(item.get("role", ROLES[i % 2])).strip().lower()
        turns.append(DialogueTurn("agent" if role == "system" else role, str(item.get("description", "")), content))
    return Dialogue(flow_id, turns)


def generate_dialogue(llm: LLMClient, flow: Flow, db_info: Mapping[str, Any], decoding=None) -> Dialogue:
    messages = prompts.dialogue([t.to_dict() for t in flow.turns], db_info)
    text = llm.chat(Stage.DIALOGUE, messages, decoding)
    dialogue = parse_dialogue(text, flow.flow_id)
    if dialogue is None:
        text = llm.chat(Stage.DIALOGUE, prompts.parse_retry(messages, text, "the JSON list of turns"), decoding)
        dialogue = parse_dialogue(text, flow.flow_id)
    if dialogue is None:
        raise GenerationError("dialogue response could not be parsed")
    return dialogue


@dataclass
class DialogueCheck:
    retained: bool
    reasons: list[Violation] = field(default_factory=list)


def validate_dialogue(dialogue: Dialogue, flow: Flow, lexicon: Lexicon | None = None) -> DialogueCheck:
    """Retain only dialogues matching the flow turn-for-turn with every value stated."""
    lexicon = lexicon or Lexicon.default()
    reasons: list[Violation] = []
    if len(dialogue.turns) != len(flow.turns):
        reasons.append(Violation("turn-count", None, f"{len(dialogue.turns)} turns, flow has {len(flow.turns)}"))
        return DialogueCheck(False, reasons)
    for i, (d, f) in enumerate(zip(dialogue.turns, flow.turns)):
        if d.role != f.role:
            reasons.append(Violation("role-mismatch", i, f"{d.role} != {f.role}"))
        for slot, value in f.turn_state.items():
            if not value_appears(d.content, slot, value, lexicon):
                reasons.append(Violation("missing-value", i, f"{slot}={value}"))
    return DialogueCheck(not reasons, reasons)


@dataclass
class RetentionReport:
    generated: int = 0
    retained: int = 0
    reasons: Counter = field(default_factory=Counter)

    @property
    def deleted(self) -> int:
        return self.generated - self.retained

    @property
    def rate(self) -> float:
        return self.retained / self.generated if self.generated else 0.0

    def add(self, check: DialogueCheck) -> None:
        self.generated += 1
        if check.retained:
            self.retained += 1
        else:
            for code in sorted({r.code for r in check.reasons}):
                self.reasons[code] += 1

    def add_unparseable(self) -> None:
        self.generated += 1
        self.reasons["unparseable"] += 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "generated": self.generated,
            "retained": self.retained,
            "deleted": self.deleted,
            "rate": self.rate,
            "percent": round(100 * self.rate, 1),
            "reasons": dict(sorted(self.reasons.items())),
        }


def retention_report(checks: Iterable[DialogueCheck]) -> RetentionReport:
    report = RetentionReport()
    for c in checks:
        report.add(c)
    return report
