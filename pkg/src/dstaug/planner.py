"""Domain-combination planning: judgments, seed states and the logicality filter."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Union

from . import prompts
from .llm import LLMClient, Stage, extract_json
from .schema import Schema

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DomainCombo:
    domains: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.domains)) not in (2, 3) or len(set(self.domains)) != len(self.domains):
            raise ValueError(f"a combo holds 2 or 3 distinct domains, got {self.domains}")
        object.__setattr__(self, "domains", tuple(sorted(self.domains)))

    @property
    def id(self) -> str:
        return "+".join(self.domains)

    @classmethod
    def from_id(cls, combo_id: str) -> "DomainCombo":
        return cls(tuple(combo_id.split("+")))


def enumerate_combos(domains: Iterable[str]) -> list[DomainCombo]:
    """All 2- and 3-domain subsets, pairs first, each group in lexicographic order."""
    names = sorted(set(domains))
    if len(names) < 2:
        raise ValueError("need at least two domains to combine")
    return [DomainCombo(c) for k in (2, 3) for c in itertools.combinations(names, k)]


@dataclass
class Judgment:
    combo: DomainCombo
    is_reasonable: bool
    explanation: str
    parsed: bool = True
    raw: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "combo_id": self.combo.id,
            "domains": list(self.combo.domains),
            "is_reasonable": self.is_reasonable,
            "explanation": self.explanation,
            "parsed": self.parsed,
            "raw": self.raw,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Judgment":
        return cls(DomainCombo(tuple(d["domains"])), bool(d["is_reasonable"]), d.get("explanation", ""),
                   bool(d.get("parsed", True)), d.get("raw", ""))


def _as_flag(value: Any) -> bool | None:
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)) and value in (0, 1):
        return bool(value)
    if isinstance(value, str) and value.strip().lower() in ("1", "0", "true", "false", "yes", "no"):
        return value.strip().lower() in ("1", "true", "yes")
    return None


def parse_judgment(combo: DomainCombo, text: str) -> Judgment:
    try:
        data = extract_json(text)
    except ValueError:
        data = None
    flag = _as_flag(data.get("is_reasonable")) if isinstance(data, dict) else None
    explanation = str(data.get("explanation", "")).strip() if isinstance(data, dict) else ""
    if flag is None or not explanation:
        log.warning("unparseable judgment for %s; combo skipped", combo.id)
        return Judgment(combo, False, "", parsed=False, raw=text)
    return Judgment(combo, flag, explanation, parsed=True, raw=text)


def judge_combo(llm: LLMClient, combo: DomainCombo, schema: Schema, decoding=None) -> Judgment:
    text = llm.chat(Stage.JUDGE, prompts.judgment(schema, combo.domains), decoding)
    return parse_judgment(combo, text)


# -- seed states -------------------------------------------------------------


@dataclass(frozen=True)
class Fixed:
    value: str


@dataclass(frozen=True)
class Blank:
    pass


@dataclass(frozen=True)
class Ref:
    source: str


ValueSpec = Union[Fixed, Blank, Ref]


def spec_to_json(spec: ValueSpec) -> Any:
    if isinstance(spec, Ref):
        return {"ref": spec.source}
    if isinstance(spec, Fixed):
        return spec.value
    return ""


def spec_from_json(value: Any) -> ValueSpec:
    if isinstance(value, dict):
        return Ref(value["ref"])
    return Fixed(value) if value != "" else Blank()


@dataclass
class SeedState:
    seed_id: str
    combo: DomainCombo
    entries: dict[str, ValueSpec]

    @property
    def coref(self) -> list[tuple[str, str]]:
        return [(t, v.source) for t, v in self.entries.items() if isinstance(v, Ref)]

    @property
    def domains(self) -> list[str]:
        """Domains in order of first appearance, counting reference sources."""
        seen: dict[str, None] = {}
        for slot, spec in self.entries.items():
            seen.setdefault(slot.split("-", 1)[0])
        for _, src in self.coref:
            seen.setdefault(src.split("-", 1)[0])
        return list(seen)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed_id": self.seed_id,
            "combo_id": self.combo.id,
            "entries": {k: spec_to_json(v) for k, v in self.entries.items()},
            "coref": [list(p) for p in self.coref],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SeedState":
        return cls(d["seed_id"], DomainCombo.from_id(d["combo_id"]),
                   {k: spec_from_json(v) for k, v in d["entries"].items()})


def parse_seed_state(raw: dict[str, Any], combo: DomainCombo, schema: Schema, seed_id: str) -> SeedState:
    """Turn one model-written dictionary into a :class:`SeedState`.

    Keys are resolved to canonical slot names when possible; unresolvable keys
    are kept verbatim so the filter can reject the seed. A value that names a
    slot of a known domain becomes a reference.
    """
    entries: dict[str, ValueSpec] = {}
    for key, value in raw.items():
        slot = schema.resolve(key) or str(key).strip().lower()
        if value is None or (isinstance(value, str) and not value.strip()):
            entries[slot] = Blank()
            continue
        if isinstance(value, (dict, list)):
            entries[slot] = Blank()
            continue
        text = str(value).strip()
        if schema.looks_like_slot(text):
            entries[slot] = Ref(schema.resolve(text) or text.lower())
        else:
            entries[slot] = Fixed(text)
    return SeedState(seed_id, combo, entries)


def generate_seed_states(
    llm: LLMClient, judgment: Judgment, schema: Schema, cap: int | None = None, decoding=None
) -> list[SeedState]:
    if not (judgment.parsed and judgment.is_reasonable):
        return []
    messages = prompts.seed_states(prompts.judgment(schema, judgment.combo.domains), judgment.raw)
    text = llm.chat(Stage.SEED, messages, decoding)
    return parse_seed_response(text, judgment.combo, schema, cap)


def parse_seed_response(text: str, combo: DomainCombo, schema: Schema, cap: int | None = None) -> list[SeedState]:
    try:
        data = extract_json(text)
    except ValueError:
        data = None
    if not isinstance(data, list):
        log.warning("no seed-state list in response for %s", combo.id)
        return []
    dicts = [d for d in data if isinstance(d, dict) and d]
    if cap is not None:
        dicts = dicts[:cap]
    return [parse_seed_state(d, combo, schema, f"{combo.id}/{i}") for i, d in enumerate(dicts)]


# -- logicality rules --------------------------------------------------------

TIME_SLOTS = {"arriveby", "leaveat", "book time"}
DAY_SLOTS = {"day", "book day"}


def _name(slot: str) -> str:
    return slot.split("-", 1)[1] if "-" in slot else slot


def _domain(slot: str) -> str:
    return slot.split("-", 1)[0]


@dataclass(frozen=True)
class Rule:
    id: str
    description: str
    # (target, source, combo domains, schema) -> True when the link violates the rule
    violates: Callable[[str, str, tuple[str, ...], Schema], bool]


DEFAULT_RULES: tuple[Rule, ...] = (
    Rule("R1", "departure/destination cannot come from an area slot",
         lambda t, s, c, sc: _name(t) in {"departure", "destination"} and _name(s) == "area"),
    Rule("R2", "time slots and day slots cannot refer to each other",
         lambda t, s, c, sc: (_name(t) in TIME_SLOTS and _name(s) in DAY_SLOTS)
         or (_name(t) in DAY_SLOTS and _name(s) in TIME_SLOTS)),
    Rule("R3", "an area slot can only come from an area slot",
         lambda t, s, c, sc: _name(t) == "area" and _name(s) != "area"),
    Rule("R4", "train departure/destination cannot come from another domain",
         lambda t, s, c, sc: t in {"train-departure", "train-destination"} and _domain(s) != "train"),
    Rule("R5", "both ends must be in different domains",
         lambda t, s, c, sc: _domain(t) == _domain(s)),
    Rule("R6", "both ends must be schema slots",
         lambda t, s, c, sc: t not in sc or s not in sc),
    Rule("R7", "taxi leave-at and a booking time cannot refer to each other",
         lambda t, s, c, sc: (t == "taxi-leaveat" and _name(s) == "book time")
         or (s == "taxi-leaveat" and _name(t) == "book time")),
    Rule("R8", "the source must belong to one of the combined domains",
         lambda t, s, c, sc: _domain(s) not in c),
)


@dataclass
class RuleSet:
    rules: tuple[Rule, ...] = DEFAULT_RULES

    def __post_init__(self) -> None:
        ids = [r.id for r in self.rules]
        if len(ids) != len(set(ids)):
            raise ValueError("rule identifiers must be unique")

    def violations(self, target: str, source: str, combo: tuple[str, ...], schema: Schema) -> list[str]:
        return [r.id for r in self.rules if r.violates(target, source, combo, schema)]


@dataclass
class RemovedLink:
    target: str
    source: str
    rules: list[str]


@dataclass
class FilterResult:
    seed: SeedState
    removed: list[RemovedLink] = field(default_factory=list)
    dropped_literals: list[str] = field(default_factory=list)
    rejected: bool = False
    reason: str = ""
    flagged: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            **self.seed.to_dict(),
            "removed": [{"target": r.target, "source": r.source, "rules": r.rules} for r in self.removed],
            "dropped_literals": self.dropped_literals,
            "rejected": self.rejected,
            "reason": self.reason,
            "flagged": self.flagged,
        }


def filter_seed_state(seed: SeedState, schema: Schema, rules: RuleSet | None = None) -> FilterResult:
    """Remove rule-violating references and out-of-pool literals.

    A removed reference leaves a blank behind. Seeds with slots missing from the
    schema, or slots of domains outside the combo, are rejected outright.
    """
    rules = rules or RuleSet()
    combo = seed.combo.domains
    for slot in seed.entries:
        if slot not in schema:
            return FilterResult(seed, rejected=True, reason=f"unknown slot {slot!r}")
        if _domain(slot) not in combo:
            return FilterResult(seed, rejected=True, reason=f"slot {slot!r} outside combo {seed.combo.id}")

    cleaned: dict[str, ValueSpec] = {}
    removed: list[RemovedLink] = []
    dropped: list[str] = []
    for slot, spec in seed.entries.items():
        if isinstance(spec, Ref):
            fired = rules.violations(slot, spec.source, combo, schema)
            if fired:
                removed.append(RemovedLink(slot, spec.source, fired))
                spec = Blank()
        elif isinstance(spec, Fixed):
            canon = schema.slot(slot).canonical(spec.value)
            if canon is None:
                dropped.append(slot)
                spec = Blank()
            else:
                spec = Fixed(canon)
        cleaned[slot] = spec

    out = SeedState(seed.seed_id, seed.combo, cleaned)
    flagged = bool(seed.coref) and not out.coref
    return FilterResult(out, removed=removed, dropped_literals=dropped, flagged=flagged)
