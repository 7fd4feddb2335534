"""Grounding seed states into full dialogue states by sampling the entity database."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any

from .planner import Blank, Fixed, Ref, SeedState
from .schema import DONTCARE, Database, Entity, Schema
from .textnorm import normalize

TIME_GRID = [f"{m // 60:02d}:{m % 60:02d}" for m in range(8 * 60, 22 * 60 + 1, 15)]
PLACE_SLOTS = ("departure", "destination")


class DependencyCycle(ValueError):
    pass


class Unsatisfiable(RuntimeError):
    pass


@dataclass
class DialogueState:
    state_id: str
    seed_id: str
    entries: dict[str, str]
    coref: list[tuple[str, str]] = field(default_factory=list)
    entities: dict[str, Entity] = field(default_factory=dict)
    combo_id: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "state_id": self.state_id,
            "seed_id": self.seed_id,
            "combo_id": self.combo_id,
            "entries": self.entries,
            "coref": [list(p) for p in self.coref],
            "entities": self.entities,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DialogueState":
        return cls(d["state_id"], d["seed_id"], dict(d["entries"]), [tuple(p) for p in d.get("coref", [])],
                   dict(d.get("entities", {})), d.get("combo_id", ""))


def _domain(slot: str) -> str:
    return slot.split("-", 1)[0]


def dependency_order(seed: SeedState) -> list[str]:
    """Domains ordered so every reference source's domain precedes its target's.

    Ties go to the domain that appears first in the seed. Raises
    :class:`DependencyCycle` when the domain graph has a cycle.
    """
    nodes = seed.domains
    rank = {d: i for i, d in enumerate(nodes)}
    preds: dict[str, set[str]] = {d: set() for d in nodes}
    for target, source in seed.coref:
        a, b = _domain(source), _domain(target)
        if a != b:
            preds[b].add(a)
    order: list[str] = []
    remaining = set(nodes)
    while remaining:
        ready = sorted((d for d in remaining if not preds[d] & remaining), key=rank.__getitem__)
        if not ready:
            stuck = sorted(remaining, key=rank.__getitem__)
            edges = sorted(f"{s}->{t}" for t, s in seed.coref if _domain(t) in remaining and _domain(s) in remaining)
            raise DependencyCycle(f"cyclic references among {stuck}: {', '.join(edges)}")
        order.append(ready[0])
        remaining.remove(ready[0])
    return order


def _later_time(after: str, rng: random.Random, before: bool = False) -> str | None:
    pool = [t for t in TIME_GRID if (t < after if before else t > after)]
    return rng.choice(pool) if pool else None


def _slots_of(seed: SeedState, domain: str) -> list[str]:
    slots = [s for s in seed.entries if _domain(s) == domain]
    for _, src in seed.coref:
        if _domain(src) == domain and src not in slots:
            slots.append(src)
    return slots


def _inject_dontcare(seed: SeedState, schema: Schema, rng: random.Random, prob: float) -> dict[str, Any]:
    entries = dict(seed.entries)
    if prob <= 0:
        return entries
    linked = {s for pair in seed.coref for s in pair}
    for slot, spec in seed.entries.items():
        if isinstance(spec, Fixed) and slot not in linked and schema.slot(slot).kind == "categorical":
            if rng.random() < prob:
                entries[slot] = Fixed(DONTCARE)
    return entries


def _attempt(seed: SeedState, entries: dict, order: list[str], schema: Schema, db: Database,
             rng: random.Random) -> tuple[dict[str, str], dict[str, Entity]] | None:
    values: dict[str, str] = {}
    chosen: dict[str, Entity] = {}
    for domain in order:
        slots = _slots_of(seed, domain)
        for slot in slots:
            spec = entries.get(slot, Blank())
            if isinstance(spec, Ref):
                values[slot] = values[spec.source]
            elif isinstance(spec, Fixed):
                values[slot] = spec.value

        dspec = schema.domain(domain)
        if dspec.has_db:
            filters = {
                s: values[s] for s in slots
                if s in values and schema.slot(s).db_field and normalize(values[s]) != DONTCARE
            }
            matches = db.query(domain, filters)
            if not matches:
                return None
            ent = rng.choice(matches)
            chosen[domain] = ent
            for s in slots:
                spec = schema.slot(s)
                if not spec.db_field or isinstance(entries.get(s), Ref):
                    continue  # references keep the source value verbatim
                if s not in values or normalize(values[s]) != DONTCARE:
                    raw = ent[spec.db_field]
                    values[s] = spec.canonical(raw) or raw

        for s in slots:
            if s in values:
                continue
            spec = schema.slot(s)
            name = s.split("-", 1)[1]
            if spec.kind == "time":
                t = _sample_time(s, values, slots, rng)
                if t is None:
                    return None  # no time on the grid keeps leave-at before arrive-by
                values[s] = t
            elif spec.pool:
                values[s] = rng.choice(spec.pool)
            elif name in PLACE_SLOTS:
                values[s] = _sample_place(s, values, chosen, db, rng)
            else:
                values[s] = rng.choice(db.names())
        if values.get(f"{domain}-departure") and values.get(f"{domain}-departure") == values.get(f"{domain}-destination"):
            return None
    return values, chosen


def _sample_time(slot: str, values: dict[str, str], slots: list[str], rng: random.Random) -> str | None:
    domain, name = slot.split("-", 1)
    if name == "leaveat" and f"{domain}-arriveby" in slots:
        other = values.get(f"{domain}-arriveby")
        if other and other != DONTCARE:
            return _later_time(other, rng, before=True)
    if name == "arriveby" and f"{domain}-leaveat" in slots:
        other = values.get(f"{domain}-leaveat")
        if other and other != DONTCARE:
            return _later_time(other, rng)
        # sample the pair together so leave-at < arrive-by
        leave = rng.choice(TIME_GRID[:-1])
        values[f"{domain}-leaveat"] = leave
        return _later_time(leave, rng)  # type: ignore[return-value]
    return rng.choice(TIME_GRID)


def _sample_place(slot: str, values: dict[str, str], chosen: dict[str, Entity], db: Database,
                  rng: random.Random) -> str:
    domain, name = slot.split("-", 1)
    other = values.get(f"{domain}-{'destination' if name == 'departure' else 'departure'}")
    local = [e["name"] for e in chosen.values() if e.get("name") and e["name"] != other]
    used = set(values.values())
    fresh = [n for n in local if n not in used]
    if fresh:
        return fresh[0]
    pool = [n for n in db.names() if n != other]
    return rng.choice(pool)


def fill_state(seed: SeedState, schema: Schema, db: Database, rng: random.Random, *,
               state_id: str | None = None, retries: int = 10, dontcare_prob: float = 0.0) -> DialogueState:
    """Sample one concrete state for ``seed``.

    Domains are visited in :func:`dependency_order`. DB-backed domains draw
    one entity uniformly from those matching the literal and already resolved
    reference values; references copy their source value verbatim. Raises
    :class:`Unsatisfiable` after ``retries`` failed attempts.
    """
    order = dependency_order(seed)
    for _ in range(max(1, retries)):
        entries = _inject_dontcare(seed, schema, rng, dontcare_prob)
        result = _attempt(seed, entries, order, schema, db, rng)
        if result is None:
            continue
        values, chosen = result
        keys = sorted(values, key=schema.slot_rank)
        return DialogueState(
            state_id=state_id or f"{seed.seed_id}/0",
            seed_id=seed.seed_id,
            entries={k: values[k] for k in keys},
            coref=list(seed.coref),
            entities={d: dict(chosen[d]) for d in order if d in chosen},
            combo_id=seed.combo.id,
        )
    raise Unsatisfiable(f"seed {seed.seed_id}: no consistent entities after {retries} attempts")


def expand_seed(seed: SeedState, schema: Schema, db: Database, n: int, rng: random.Random, *,
                retries: int = 10, dontcare_prob: float = 0.0) -> list[DialogueState]:
    """Up to ``n`` distinct states for ``seed``.

    Draws continue past ``n`` (at most ``3 * n`` draws) while duplicates turn
    up, so small pools may still return fewer than ``n``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    out: list[DialogueState] = []
    seen: set[tuple] = set()
    for _ in range(3 * n):
        if len(out) == n:
            break
        try:
            st = fill_state(seed, schema, db, rng, state_id=f"{seed.seed_id}/{len(out)}",
                            retries=retries, dontcare_prob=dontcare_prob)
        except Unsatisfiable:
            break
        key = tuple(sorted(st.entries.items()))
        if key in seen:
            continue
        seen.add(key)
        out.append(st)
    return out
