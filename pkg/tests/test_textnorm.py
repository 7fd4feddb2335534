from hypothesis import given, strategies as st

from dstaug.textnorm import Lexicon, mentions, normalize, normalize_text, time_variants, value_appears


def test_normalize_basics():
    assert normalize("  The  Cambridge Chop House ") == "cambridge chop house"
    assert normalize("9:30") == "09:30"
    assert normalize("19:30") == "19:30"


@given(st.text(max_size=40))
def test_normalize_idempotent(s):
    assert normalize(normalize(s)) == normalize(s)


def test_normalize_text_strips_punctuation_but_keeps_times():
    assert normalize_text("Leaving at 7:15, please!") == "leaving at 07:15 please"
    assert normalize_text("at 12:30pm") == "at 12:30 pm"
    assert normalize_text("I'd like it") == "id like it"


def test_time_variants():
    assert time_variants("19:00") == ["19:00", "7:00 pm", "07:00 pm", "7 pm"]
    assert time_variants("09:30") == ["09:30", "9:30"]
    assert "noon" in time_variants("12:00")
    assert time_variants("not a time") == ["not a time"]


def test_mentions_is_token_bounded():
    assert mentions("book for 1 person", "1")
    assert not mentions("at 12:30", "1")
    assert not mentions("the centreville hotel", "centre")


def test_value_appears_times_numbers_synonyms():
    lex = Lexicon.default()
    assert value_appears("a table at 7 pm", "restaurant-book time", "19:00", lex)
    assert value_appears("for two people", "restaurant-book people", "2", lex)
    assert value_appears("somewhere in the city center", "restaurant-area", "centre", lex)
    assert not value_appears("somewhere nice", "restaurant-area", "centre", lex)


def test_value_appears_booleans_and_dontcare():
    assert value_appears("it should have free wifi", "hotel-internet", "yes")
    assert not value_appears("I do not need internet", "hotel-internet", "yes")
    assert value_appears("I do not need internet", "hotel-internet", "no")
    assert value_appears("the price doesn't matter", "hotel-pricerange", "dontcare")


def test_lexicon_from_dict_merges():
    lex = Lexicon.from_dict({"synonyms": {"north": ["northern part"]}})
    assert value_appears("in the northern part", "hotel-area", "north", lex)
    assert "centre" in lex.synonyms
