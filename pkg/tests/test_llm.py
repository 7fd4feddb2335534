import json

import httpx
import pytest
from hypothesis import given, strategies as st

from dstaug.llm import (
    DEFAULT_DECODING, ChatRequest, HttpBackend, LLMClient, LLMError, RecordingBackend, ReplayBackend, ReplayMiss,
    RetriesExhausted, Stage, TransientError, extract_json, read_cassette, record_cassette, write_cassette,
)

MSGS = [("system", "be brief"), ("user", "hello")]


class Flaky:
    """Fails ``failures`` times with a transient error, then echoes."""

    def __init__(self, failures=0, text="ok"):
        self.failures = failures
        self.text = text
        self.calls = 0

    def send(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransientError("busy")
        return self.text


def test_default_decoding():
    assert DEFAULT_DECODING[Stage.DIALOGUE] == (0.7, 1.0)
    assert all(DEFAULT_DECODING[s] == (0.0, 1.0) for s in Stage if s is not Stage.DIALOGUE)
    assert ChatRequest.build(Stage.DIALOGUE, MSGS).temperature == 0.7


def test_digest_ignores_stage_but_not_decoding():
    a = ChatRequest(tuple(MSGS), Stage.GOAL, 0.0, 1.0)
    b = ChatRequest(tuple(MSGS), Stage.FLOW, 0.0, 1.0)
    c = ChatRequest(tuple(MSGS), Stage.GOAL, 0.7, 1.0)
    assert a.digest == b.digest != c.digest
    assert len(a.digest) == 64


@given(st.lists(st.tuples(st.sampled_from(["system", "user", "assistant"]), st.text(max_size=20)), min_size=1, max_size=4))
def test_request_roundtrip(messages):
    req = ChatRequest(tuple(messages), Stage.SEED)
    again = ChatRequest.from_dict(json.loads(json.dumps(req.to_dict())))
    assert again == req and again.digest == req.digest


@pytest.mark.parametrize("kwargs", [
    {"messages": ()},
    {"messages": (("robot", "x"),)},
    {"messages": tuple(MSGS), "temperature": 3.0},
    {"messages": tuple(MSGS), "top_p": 0.0},
])
def test_invalid_requests(kwargs):
    with pytest.raises(ValueError):
        ChatRequest(stage=Stage.JUDGE, **kwargs)


def test_cache_hits_avoid_backend(tmp_path):
    backend = Flaky(text="cached reply")
    llm = LLMClient(backend, cache_dir=tmp_path)
    assert llm.chat(Stage.JUDGE, MSGS) == "cached reply"
    assert llm.chat(Stage.JUDGE, MSGS) == "cached reply"
    assert backend.calls == 1
    # a fresh client reads the disk cache
    other = LLMClient(Flaky(text="different"), cache_dir=tmp_path)
    assert other.chat(Stage.JUDGE, MSGS) == "cached reply"
    assert other.stats.backend_calls == 0 and other.stats.cache_hits == 1


def test_retry_with_backoff():
    delays = []
    backend = Flaky(failures=3)
    llm = LLMClient(backend, max_retries=4, backoff_base=0.5, sleep=delays.append)
    resp = llm.complete(ChatRequest.build(Stage.GOAL, MSGS))
    assert resp.text == "ok" and resp.attempt_count == 4
    assert delays == [0.5, 1.0, 2.0]
    assert llm.stats.retries == 3


def test_retries_exhausted_and_backoff_cap():
    delays = []
    llm = LLMClient(Flaky(failures=100), max_retries=6, backoff_base=10, backoff_cap=30, sleep=delays.append)
    with pytest.raises(RetriesExhausted):
        llm.chat(Stage.GOAL, MSGS)
    assert delays == [10, 20, 30, 30, 30, 30]


def test_empty_completion_is_retried():
    class Empty:
        calls = 0

        def send(self, request):
            self.calls += 1
            return "" if self.calls == 1 else "filled"

    llm = LLMClient(Empty(), sleep=lambda s: None)
    assert llm.chat(Stage.FLOW, MSGS) == "filled"


def test_replay_and_recording(tmp_path):
    path = tmp_path / "c.jsonl"
    req = ChatRequest.build(Stage.JUDGE, MSGS)
    assert record_cassette([req], Flaky(text="recorded"), path) == 1
    assert read_cassette(path)[req.digest]["response"] == "recorded"
    replay = LLMClient(ReplayBackend(path))
    assert replay.chat(Stage.JUDGE, MSGS) == "recorded"
    with pytest.raises(ReplayMiss):
        replay.chat(Stage.JUDGE, [("user", "never recorded")])


def test_cassette_merge_and_stable_bytes(tmp_path):
    path = tmp_path / "c.jsonl"
    rec = RecordingBackend(Flaky(text="a"))
    rec.send(ChatRequest.build(Stage.JUDGE, MSGS))
    rec.save(path)
    rec2 = RecordingBackend(Flaky(text="b"))
    rec2.send(ChatRequest.build(Stage.JUDGE, [("user", "second")]))
    rec2.save(path)
    entries = read_cassette(path)
    assert len(entries) == 2
    before = path.read_bytes()
    write_cassette(path, dict(reversed(list(entries.items()))))
    assert path.read_bytes() == before


def _transport(handler):
    return httpx.MockTransport(handler)


def test_http_backend_payload(monkeypatch):
    monkeypatch.setenv("TEST_TOKEN", "secret")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        seen["url"] = str(request.url)
        return httpx.Response(200, json={"choices": [{"message": {"content": "hi there"}}]})

    backend = HttpBackend("https://llm.example/v1", "some-model", "TEST_TOKEN", transport=_transport(handler))
    assert backend.send(ChatRequest.build(Stage.DIALOGUE, MSGS)) == "hi there"
    assert seen["auth"] == "Bearer secret"
    assert seen["url"] == "https://llm.example/v1/chat/completions"
    assert seen["body"]["model"] == "some-model"
    assert seen["body"]["temperature"] == 0.7 and seen["body"]["top_p"] == 1.0
    assert seen["body"]["messages"][1] == {"role": "user", "content": "hello"}


@pytest.mark.parametrize("status", [408, 429, 500, 503])
def test_http_backend_transient_statuses(monkeypatch, status):
    monkeypatch.setenv("TEST_TOKEN", "secret")
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            return httpx.Response(status, text="slow down")
        return httpx.Response(200, json={"choices": [{"message": {"content": "recovered"}}]})

    backend = HttpBackend("https://llm.example/v1", "m", "TEST_TOKEN", transport=_transport(handler))
    llm = LLMClient(backend, sleep=lambda s: None)
    assert llm.chat(Stage.GOAL, MSGS) == "recovered"
    assert len(calls) == 2


def test_http_backend_client_error_not_retried(monkeypatch):
    monkeypatch.setenv("TEST_TOKEN", "secret")
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad request")

    llm = LLMClient(HttpBackend("https://llm.example/v1", "m", "TEST_TOKEN", transport=_transport(handler)),
                    sleep=lambda s: None)
    with pytest.raises(Exception) as info:
        llm.chat(Stage.GOAL, MSGS)
    assert not isinstance(info.value, RetriesExhausted)
    assert len(calls) == 1


def test_http_backend_without_token_and_bad_body(monkeypatch):
    monkeypatch.delenv("MISSING_TOKEN", raising=False)
    seen = []

    def handler(request):
        seen.append("authorization" in request.headers)
        return httpx.Response(200, json={})

    backend = HttpBackend("https://llm.example/v1", "m", "MISSING_TOKEN", transport=_transport(handler))
    with pytest.raises(LLMError, match="unexpected response body"):
        backend.send(ChatRequest.build(Stage.GOAL, MSGS))
    assert seen == [False]


@pytest.mark.parametrize("text, expected", [
    ('{"a": 1}', {"a": 1}),
    ('Sure! Here you go:\n```json\n[{"a": 1}, {"b": 2}]\n```\nHope it helps.', [{"a": 1}, {"b": 2}]),
    ('note {not json} then {"is_reasonable": 1, "explanation": "x"}', {"is_reasonable": 1, "explanation": "x"}),
    ("{“x”: “y”}", {"x": "y"}),
])
def test_extract_json(text, expected):
    assert extract_json(text) == expected


def test_extract_json_failure():
    with pytest.raises(ValueError):
        extract_json("no structure at all")
