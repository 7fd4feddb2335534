"""Ontology and entity database.

Slot names are always handled in ``domain-slot`` form (``restaurant-book time``).
LLM output spells slots loosely (``taxi-leave at``, ``restaurant-booktime``), so
lookups go through :meth:`Schema.resolve`, which compares squashed names and
declared aliases.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .textnorm import normalize

SLOT_KINDS = ("categorical", "open", "time", "boolean")
DONTCARE = "dontcare"
_TIME_VALUE = re.compile(r"^\d\d:\d\d$")


class SchemaError(ValueError):
    pass


def _squash(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


@dataclass(frozen=True)
class SlotSpec:
    name: str
    kind: str
    pool: tuple[str, ...] = ()
    db_field: str | None = None
    aliases: tuple[str, ...] = ()

    def accepts(self, value: str) -> bool:
        """Whether ``value`` is legal for this slot (``dontcare`` always is)."""
        v = normalize(value)
        if v == DONTCARE:
            return True
        if self.kind in ("categorical", "boolean"):
            return v in {normalize(p) for p in self.pool}
        if self.kind == "time":
            return bool(_TIME_VALUE.match(v))
        return bool(v)

    def canonical(self, value: str) -> str | None:
        """Pool spelling of ``value`` for closed slots, ``None`` if not in the pool."""
        v = normalize(value)
        if v == DONTCARE:
            return DONTCARE
        if self.kind in ("categorical", "boolean"):
            for p in self.pool:
                if normalize(p) == v:
                    return p
            return None
        if self.kind == "time":
            return v if _TIME_VALUE.match(v) else None
        return str(value).strip()


@dataclass(frozen=True)
class DomainSpec:
    name: str
    slots: tuple[SlotSpec, ...]

    @property
    def has_db(self) -> bool:
        return any(s.db_field for s in self.slots)


@dataclass
class Schema:
    domains: list[DomainSpec]
    version: str = ""
    _index: dict[str, tuple[DomainSpec, SlotSpec]] = field(default_factory=dict, repr=False)
    _squashed: dict[str, str] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.validate()
        for d in self.domains:
            for s in d.slots:
                key = f"{d.name}-{s.name}"
                self._index[key] = (d, s)
                for spelling in (s.name, *s.aliases):
                    self._squashed.setdefault(_squash(f"{d.name}{spelling}"), key)

    def validate(self) -> None:
        if not self.domains:
            raise SchemaError("schema defines no domains")
        seen: set[str] = set()
        for d in self.domains:
            if d.name in seen:
                raise SchemaError(f"duplicate domain {d.name!r}")
            seen.add(d.name)
            if "-" in d.name:
                raise SchemaError(f"domain name {d.name!r} may not contain '-'")
            slot_names: set[str] = set()
            for s in d.slots:
                if s.name in slot_names:
                    raise SchemaError(f"duplicate slot {d.name}-{s.name}")
                slot_names.add(s.name)
                if s.kind not in SLOT_KINDS:
                    raise SchemaError(f"{d.name}-{s.name}: unknown kind {s.kind!r}")
                if s.kind in ("categorical", "boolean") and not s.pool:
                    raise SchemaError(f"{d.name}-{s.name}: {s.kind} slot needs a non-empty pool")

    @property
    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]

    def domain(self, name: str) -> DomainSpec:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(name)

    def slot(self, domain_slot: str) -> SlotSpec:
        return self._index[domain_slot][1]

    def __contains__(self, domain_slot: object) -> bool:
        return domain_slot in self._index

    def all_slots(self) -> list[str]:
        return list(self._index)

    def slot_rank(self, domain_slot: str) -> int:
        """Position in schema order; unknown slots sort last."""
        try:
            return list(self._index).index(domain_slot)
        except ValueError:
            return len(self._index)

    def resolve(self, name: str) -> str | None:
        """Canonical ``domain-slot`` for a loosely spelled name, or ``None``."""
        name = str(name).strip().lower()
        if name in self._index:
            return name
        return self._squashed.get(_squash(name))

    def looks_like_slot(self, text: str) -> str | None:
        """Domain prefix of ``text`` if it has the ``domain-slot`` shape for a known domain."""
        head, sep, _ = str(text).strip().lower().partition("-")
        if sep and head in self.domain_names:
            return head
        return None

    @classmethod
    def from_dict(cls, data: Mapping) -> "Schema":
        try:
            domains = [
                DomainSpec(
                    name=d["name"],
                    slots=tuple(
                        SlotSpec(
                            name=s["name"],
                            kind=s.get("kind", "open"),
                            pool=tuple(s.get("pool") or ()),
                            db_field=s.get("db_field"),
                            aliases=tuple(s.get("aliases") or ()),
                        )
                        for s in d.get("slots", [])
                    ),
                )
                for d in data.get("domains", [])
            ]
        except (KeyError, TypeError, AttributeError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from exc
        return cls(domains=domains, version=str(data.get("version", "")))

    def to_dict(self) -> dict:
        out = []
        for d in self.domains:
            slots = []
            for s in d.slots:
                item: dict = {"name": s.name, "kind": s.kind}
                if s.pool:
                    item["pool"] = list(s.pool)
                if s.db_field:
                    item["db_field"] = s.db_field
                if s.aliases:
                    item["aliases"] = list(s.aliases)
                slots.append(item)
            out.append({"name": d.name, "slots": slots})
        return {"version": self.version, "domains": out}


def load_schema(path: str | Path | None = None) -> Schema:
    """Load and validate a schema file; ``None`` loads the bundled five-domain schema."""
    if path is None:
        text = resources.files("dstaug.data").joinpath("schema.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"cannot parse schema {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaError("schema root must be an object")
    return Schema.from_dict(data)


Entity = dict[str, str]


class Database:
    """Per-domain entity tables, immutable after construction."""

    def __init__(self, schema: Schema, tables: Mapping[str, Iterable[Mapping[str, str]]]):
        self.schema = schema
        self._tables: dict[str, tuple[Entity, ...]] = {}
        for name, rows in tables.items():
            self._tables[name] = tuple({k: str(v) for k, v in row.items()} for row in rows)
        for d in schema.domains:
            if not d.has_db:
                continue
            if d.name not in self._tables:
                raise SchemaError(f"no entity table for DB-backed domain {d.name!r}")
            for s in d.slots:
                if not s.db_field:
                    continue
                for i, ent in enumerate(self._tables[d.name]):
                    if s.db_field not in ent:
                        raise SchemaError(f"{d.name}[{i}] lacks field {s.db_field!r} backing slot {s.name!r}")

    @property
    def domains(self) -> list[str]:
        return list(self._tables)

    def table(self, domain: str) -> tuple[Entity, ...]:
        if domain not in self._tables:
            raise KeyError(f"no entity table for domain {domain!r}")
        return self._tables[domain]

    def names(self) -> list[str]:
        """Every entity ``name`` across tables, in table order."""
        return [e["name"] for d in self._tables for e in self._tables[d] if e.get("name")]

    def query(self, domain: str, filters: Mapping[str, str]) -> list[Entity]:
        return query_entities(self, domain, filters)


def _filter_field(schema: Schema, domain: str, slot: str) -> str:
    key = slot if slot.startswith(f"{domain}-") else f"{domain}-{slot}"
    resolved = schema.resolve(key)
    if resolved is None:
        raise KeyError(f"unknown slot {key!r}")
    field_name = schema.slot(resolved).db_field
    if not field_name:
        raise KeyError(f"slot {resolved!r} is not backed by a database field")
    return field_name


def query_entities(db: Database, domain: str, filters: Mapping[str, str]) -> list[Entity]:
    """Entities of ``domain`` matching every filter under :func:`normalize`.

    Filter keys may be bare slot names (``area``) or ``domain-slot``. A
    ``dontcare`` filter value matches everything. Order follows the table.
    """
    rows = db.table(domain)
    wanted = [(_filter_field(db.schema, domain, k), normalize(v)) for k, v in filters.items()]
    wanted = [(f, v) for f, v in wanted if v != DONTCARE]
    return [e for e in rows if all(normalize(e.get(f, "")) == v for f, v in wanted)]


def load_database(schema: Schema, db_dir: str | Path | None = None) -> Database:
    """Load ``<domain>.json`` for every DB-backed domain; ``None`` uses the bundled tables."""
    tables: dict[str, list] = {}
    for d in schema.domains:
        if not d.has_db:
            continue
        if db_dir is None:
            text = resources.files("dstaug.data").joinpath("db", f"{d.name}.json").read_text(encoding="utf-8")
        else:
            p = Path(db_dir) / f"{d.name}.json"
            if not p.exists():
                raise SchemaError(f"missing entity table {p}")
            text = p.read_text(encoding="utf-8")
        rows = json.loads(text)
        if not isinstance(rows, list):
            raise SchemaError(f"entity table for {d.name} must be a JSON array")
        tables[d.name] = rows
    return Database(schema, tables)
