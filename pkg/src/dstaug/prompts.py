"""Prompt builders for every LLM stage.

Each builder returns a list of ``(role, text)`` messages. Structured inputs are
embedded as JSON under ``## <Section>`` headers so they can be located again
when inspecting cassettes.
"""

from __future__ import annotations

import json
from typing import Any, Mapping, Sequence

from .schema import Schema

Messages = list[tuple[str, str]]

SYSTEM = "You are a careful assistant that designs data for a task-oriented dialogue system."


def dump(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=1)


def describe_schema(schema: Schema) -> str:
    lines = [f"The agent supports {len(schema.domains)} domains with the following slots:"]
    for i, d in enumerate(schema.domains, 1):
        lines.append(f"{i}. {d.name.capitalize()}: {{{', '.join(s.name for s in d.slots)}}}")
    lines.append("Closed slots and their allowed values:")
    seen: dict[tuple[str, ...], list[str]] = {}
    times: list[str] = []
    for d in schema.domains:
        for s in d.slots:
            if s.pool:
                seen.setdefault(s.pool, [])
                if s.name not in seen[s.pool]:
                    seen[s.pool].append(s.name)
            elif s.kind == "time" and s.name not in times:
                times.append(s.name)
    for i, (pool, names) in enumerate(seen.items(), 1):
        lines.append(f"{i}. {' / '.join(names)}: {', '.join(pool)}")
    if times:
        lines.append(f"{len(seen) + 1}. {' / '.join(times)}: a 24-hour time written as \"hh:mm\", e.g. \"13:00\"")
    return "\n".join(lines)


def judgment(schema: Schema, domains: Sequence[str]) -> Messages:
    text = (
        f"{describe_schema(schema)}\n\n"
        "I will name a few of these domains. Decide whether a single conversation between a user "
        "and the agent could sensibly involve all of them; the order of the domains is up to you. "
        "Answer in JSON as {\"is_reasonable\": <1 if reasonable, 0 otherwise>, "
        "\"explanation\": <why>}.\n\n"
        f"## Domains: {', '.join(domains)}"
    )
    return [("system", SYSTEM), ("user", text)]


SEED_INSTRUCTION = """Building on your judgement, write several dialogue states that contain different kinds of cross-domain dependencies. A dialogue state is a JSON object mapping "domain-slot" to a value and summarizes what the user wants from the agent. Decide yourself how many states to produce and return them as a JSON list.

Fill closed slots with values you choose. Leave every other slot as an empty string; those are filled later. Values must be consistent across domains. When one slot takes its value from a slot of another domain, write the source slot name as the value, e.g. "domain1-slot": "domain2-slot". Only refer to the domains listed above. The system enforces these restrictions:
1) departure and destination never take their value from an area slot.
2) arrive by, leave at and book time never take their value from day or book day, and day or book day never take theirs from a time slot.
3) an area slot only takes its value from another area slot.
4) train-departure and train-destination never take their value from another domain.
5) a slot and the slot it refers to belong to different domains.
6) only slots that exist in the schema above may be used on either side.
7) referring to a slot that is left blank is fine; blanks are filled later."""


def seed_states(judgment_messages: Messages, judgment_reply: str) -> Messages:
    return [*judgment_messages, ("assistant", judgment_reply), ("user", SEED_INSTRUCTION)]


def user_goal(state: Mapping[str, str]) -> Messages:
    text = (
        f"## Dialogue State:\n{dump(dict(state))}\n\n"
        "## Instruction:\n"
        "Write the user's overall goal for a conversation with the agent, using only the information "
        "in the dialogue state and being as specific as that allows.\n"
        "- Do not name any restaurant, hotel or attraction that appears in the state; the agent "
        "proposes those during the conversation.\n"
        "- Do not add facts that are not in the state.\n"
        "- The order of the entries says nothing about priority or about the order of the conversation.\n"
        "- Leave room for the agent to make suggestions that the user accepts or adjusts.\n"
        "Write it as one paragraph in the form: \"The user wants to <need>, with preferences <details>, "
        "and would like suggestions for <kinds of places, unnamed>.\""
    )
    return [("system", SYSTEM), ("user", text)]


def user_goal_retry(first: Messages, reply: str, names: Sequence[str]) -> Messages:
    fix = (
        "The goal mentions " + ", ".join(f'"{n}"' for n in names)
        + ". Rewrite it without naming these places and keep everything else."
    )
    return [*first, ("assistant", reply), ("user", fix)]


FLOW_INSTRUCTION = """Plan the conversation behind this dialogue state as a JSON list. Each element is one turn: {"role": "agent" | "user", "description": <what the turn says>, "turn state": <the part of the dialogue state that the user states or confirms in this turn>}.
Rules:
- The first turn belongs to the agent, the last to the user, and roles alternate.
- Every entry of the dialogue state appears in some turn state, and no turn state contains anything that is not in the dialogue state.
- A user turn introduces at most six domain-slots that were not mentioned before; spread constraints over more turns when needed.
- The agent does not know the user's goal in advance.
- After a successful booking the agent gives a reference number made of 8 random characters.
- A value of "dontcare" means the user has no preference for that slot and the user must say so.
- Use the information for the agent, for example to let the user ask for a phone number or address."""


def dialogue_flow(state: Mapping[str, str], goal: str, db_info: Mapping[str, Any]) -> Messages:
    text = (
        f"## Dialogue State:\n{dump(dict(state))}\n\n"
        f"## User Goal:\n{goal}\n\n"
        f"## Information for the Agent:\n{dump(dict(db_info))}\n\n"
        f"## Instruction:\n{FLOW_INSTRUCTION}"
    )
    return [("system", SYSTEM), ("user", text)]


def parse_retry(first: Messages, reply: str, expected: str) -> Messages:
    return [*first, ("assistant", reply), ("user", f"That could not be parsed. Reply with {expected} only.")]


DIALOGUE_INSTRUCTION = """Write the conversation between the agent and the user that follows the dialogue flow exactly: one utterance per flow element, in the same order, none added and none dropped. Each utterance must say what its description asks for and state every value of its turn state explicitly. Booking reference numbers are 8 random characters.
## Output Format:
A JSON list of {"role": <role from the flow>, "description": <description from the flow>, "content": <the utterance>}"""


def dialogue(flow_turns: Sequence[Mapping[str, Any]], db_info: Mapping[str, Any]) -> Messages:
    text = (
        f"## Information for the Agent:\n{dump(dict(db_info))}\n\n"
        f"## Dialogue Flow:\n{dump(list(flow_turns))}\n\n"
        f"## Instruction:\n{DIALOGUE_INSTRUCTION}"
    )
    return [("system", SYSTEM), ("user", text)]


COMPLICATE_INSTRUCTION = """Rewrite the current turn so that the values listed under Co-reference are no longer spelled out but are referred to implicitly through the slot they come from (for example "in time for my reservation" instead of a clock time). Every other value of the turn state stays explicit. Both utterances must remain paraphrases of the originals and only the co-reference values may change. If the co-reference values are already implicit, copy the utterances unchanged.
## Output Format:
{"description": <the co-reference in plain words>, "system": <rewritten system utterance>, "user": <rewritten user utterance>}"""


def complication(
    history: Sequence[tuple[str, str]],
    system: str,
    user: str,
    turn_state: Mapping[str, str],
    coref: Mapping[str, str],
) -> Messages:
    hist = "\n".join(f"system: {s}\nuser: {u}" for s, u in history) or "(none)"
    text = (
        f"## Dialogue History:\n{hist}\n\n"
        f"## Current Turn Utterances:\nsystem: {system}\nuser: {user}\n\n"
        f"## Turn State:\n{dump(dict(turn_state))}\n\n"
        f"## Co-reference:\n{dump(dict(coref))}\n\n"
        f"## Instruction:\n{COMPLICATE_INSTRUCTION}"
    )
    return [("system", SYSTEM), ("user", text)]
