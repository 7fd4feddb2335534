"""Value normalization and surface-form matching shared by the DB, the gates and eval."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

_WS = re.compile(r"\s+")
_SHORT_TIME = re.compile(r"(?<![\d:])(\d):(\d\d)(?!\d)")
_TIME = re.compile(r"^(\d{1,2}):(\d{2})$")
# punctuation except ':' (times) is replaced by a space; apostrophes are dropped
_PUNCT = re.compile(r"[^\w\s:]")

NUMBER_WORDS = {
    "0": "zero", "1": "one", "2": "two", "3": "three", "4": "four", "5": "five",
    "6": "six", "7": "seven", "8": "eight", "9": "nine", "10": "ten",
}


def normalize(value: str) -> str:
    """Canonical form used for every value comparison.

    Lowercases, trims, collapses whitespace, drops a leading "the " and
    zero-pads single-digit hours ("9:00" -> "09:00").
    """
    text = _WS.sub(" ", str(value).strip().lower())
    if text.startswith("the "):
        text = text[4:]
    return _SHORT_TIME.sub(r"0\1:\2", text)


def normalize_text(text: str) -> str:
    """Normalization for free text (utterances): `normalize` plus punctuation stripping."""
    text = str(text).lower().replace("'", "").replace("’", "")
    text = _PUNCT.sub(" ", text)
    # a trailing ':' left over from "time:" must not glue onto the next token
    text = re.sub(r":(?!\d)", " ", text)
    text = re.sub(r"(\d)(am|pm)\b", r"\1 \2", text)
    return normalize(text)


def time_variants(value: str) -> list[str]:
    """Surface variants of an "HH:MM" value: leading-zero and 12-hour forms."""
    m = _TIME.match(value.strip())
    if not m:
        return [value]
    hour, minute = int(m.group(1)), m.group(2)
    out = [f"{hour:02d}:{minute}", f"{hour}:{minute}"]
    if hour == 0:
        out += [f"12:{minute} am"]
    elif hour == 12:
        out += [f"12:{minute} pm"]
    elif hour > 12:
        out += [f"{hour - 12}:{minute} pm", f"{hour - 12:02d}:{minute} pm"]
    if minute == "00":
        if hour > 12:
            out.append(f"{hour - 12} pm")
        elif hour == 12:
            out += ["12 pm", "noon", "midday"]
        elif hour > 0:
            out.append(f"{hour} am")
    return list(dict.fromkeys(out))


def _contains(haystack: str, needle: str) -> bool:
    needle = normalize_text(needle)
    if not needle:
        return False
    return f" {needle} " in f" {haystack} "


def mentions(text: str, phrase: str) -> bool:
    """Token-bounded containment of ``phrase`` in ``text`` after normalization."""
    return _contains(normalize_text(text), phrase)


@dataclass
class Lexicon:
    """Surface forms for values that are not literally written in utterances.

    ``boolean`` maps a slot name (without domain, e.g. ``internet``) to
    ``{"yes": [...], "no": [...]}`` phrase lists. ``synonyms`` maps a
    normalized value to alternative spellings.
    """

    boolean: dict[str, dict[str, list[str]]] = field(default_factory=dict)
    dontcare: list[str] = field(default_factory=list)
    synonyms: dict[str, list[str]] = field(default_factory=dict)
    numbers: dict[str, str] = field(default_factory=lambda: dict(NUMBER_WORDS))

    @classmethod
    def default(cls) -> "Lexicon":
        return cls(
            boolean={
                "internet": {
                    "yes": ["internet", "wifi", "wi fi", "wireless"],
                    "no": ["no internet", "without internet", "no wifi", "dont need internet",
                           "do not need internet", "internet is not needed"],
                },
                "parking": {
                    "yes": ["parking", "park"],
                    "no": ["no parking", "without parking", "dont need parking",
                           "do not need parking", "parking is not needed"],
                },
            },
            dontcare=[
                "dont care", "do not care", "doesnt matter", "does not matter", "no preference",
                "any", "anything", "anywhere", "whatever", "not particular", "either is fine",
                "either", "not picky", "flexible",
            ],
            synonyms={
                "centre": ["center", "city centre", "city center", "downtown"],
                "guest house": ["guesthouse", "guest houses", "b and b", "bed and breakfast"],
                "expensive": ["high end", "upscale", "pricey", "luxury", "fine dining", "upmarket"],
                "cheap": ["inexpensive", "budget", "low cost", "affordable", "cheaply priced"],
                "moderate": ["moderately", "moderately priced", "mid range", "midrange",
                             "reasonably priced", "reasonable"],
                "swimmingpool": ["swimming pool", "pool"],
                "nightclub": ["night club", "club"],
                "entertainment": ["entertaining", "fun"],
            },
        )

    @classmethod
    def from_dict(cls, data: dict) -> "Lexicon":
        base = cls.default()
        return cls(
            boolean={**base.boolean, **data.get("boolean", {})},
            dontcare=list(data.get("dontcare", base.dontcare)),
            synonyms={**base.synonyms, **data.get("synonyms", {})},
            numbers={**base.numbers, **data.get("numbers", {})},
        )


def value_appears(utterance: str, slot: str, value: str, lexicon: Lexicon | None = None) -> bool:
    """True when ``value`` for ``slot`` is stated explicitly in ``utterance``.

    Matching is token-bounded on normalized text, so "1" does not match
    inside "12:30".
    """
    lexicon = lexicon or Lexicon.default()
    text = normalize_text(utterance)
    val = normalize(value)
    if not val:
        return False
    slot_name = slot.split("-", 1)[-1].strip().lower()

    if val == "dontcare":
        return any(_contains(text, p) for p in lexicon.dontcare)

    if slot_name in lexicon.boolean and val in ("yes", "no"):
        phrases = lexicon.boolean[slot_name]
        if val == "no":
            return any(_contains(text, p) for p in phrases.get("no", []))
        negated = any(_contains(text, p) for p in phrases.get("no", []))
        return not negated and any(_contains(text, p) for p in phrases.get("yes", []))

    candidates = [val]
    if _TIME.match(val):
        candidates = time_variants(val)
    candidates += lexicon.synonyms.get(val, [])
    if val in lexicon.numbers:
        candidates.append(lexicon.numbers[val])
    return any(_contains(text, c) for c in candidates)
