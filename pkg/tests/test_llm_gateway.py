from __future__ import annotations

import json
import threading

import httpx
import pytest

from riskevidence.llm_gateway import (
    BackendConfig,
    CompletionRequest,
    Gateway,
    MockBackend,
    UnknownBackendError,
    build_messages,
    derive_seed,
)
from riskevidence.promptkit import RenderedPrompt


def prompt(text="You are a judge.\n\nScore this.", template_id="evaluator"):
    return RenderedPrompt(text, template_id, "v1@test")


def gateway_with(mock: MockBackend, sleeps: list | None = None, **cfg) -> Gateway:
    config = BackendConfig(name=mock.name, **cfg)
    return Gateway([config], backends={mock.name: mock},
                   sleep=(sleeps.append if sleeps is not None else (lambda s: None)))


def test_mock_passthrough():
    mock = MockBackend(name="m").add("evaluator:*", "The score is [7]")
    res = gateway_with(mock).complete(CompletionRequest(prompt(), "m"))
    assert res.ok and res.raw_text == "The score is [7]" and res.attempt_count == 1


def test_transient_failures_then_success():
    sleeps = []
    mock = MockBackend(name="m").add("evaluator:*", "ok", fail_count=2)
    res = gateway_with(mock, sleeps, max_retries=3).complete(CompletionRequest(prompt(), "m", seed=1))
    assert res.ok and res.attempt_count == 3
    assert len(mock.calls) == 3
    assert sleeps == [0.5, 1.0]


def test_retry_budget_exhausted():
    mock = MockBackend(name="m").add("evaluator:*", "never", fail_count=99)
    res = gateway_with(mock, max_retries=2).complete(CompletionRequest(prompt(), "m"))
    assert res.status == "failed" and res.raw_text is None and res.error
    assert res.attempt_count == 3 == len(mock.calls)


def test_backoff_is_capped():
    gw = gateway_with(MockBackend(name="m"))
    cfg = BackendConfig("m", backoff_base=1.0, backoff_max=5.0)
    assert [gw.backoff(cfg, a) for a in range(1, 6)] == [1.0, 2.0, 4.0, 5.0, 5.0]


def test_client_error_is_not_retried():
    mock = MockBackend(name="m").add("evaluator:*", "x", fail_count=5, fail_status=400)
    res = gateway_with(mock, max_retries=3).complete(CompletionRequest(prompt(), "m"))
    assert res.status == "failed" and res.attempt_count == 1


def test_unmatched_mock_fails_immediately():
    mock = MockBackend(name="m").add("extraction:*", "x")
    res = gateway_with(mock, max_retries=3).complete(CompletionRequest(prompt(), "m"))
    assert res.status == "failed" and res.attempt_count == 1 and "no mock rule" in res.error


def test_unknown_backend():
    gw = gateway_with(MockBackend(name="m"))
    with pytest.raises(UnknownBackendError):
        gw.complete(CompletionRequest(prompt(), "other"))
    with pytest.raises(KeyError):
        gw.complete_batch([CompletionRequest(prompt(), "other")])


def test_rule_priority_and_seed_substitution():
    p = prompt("alpha beta")
    mock = (MockBackend(name="m")
            .add("evaluator:*", "any")
            .add("evaluator:contains:beta", "contains {seed}")
            .add(f"evaluator:{p.sha256}", "hash"))
    gw = gateway_with(mock)
    assert gw.complete(CompletionRequest(p, "m")).raw_text == "hash"
    assert gw.complete(CompletionRequest(prompt("beta"), "m", seed=42)).raw_text == "contains 42"
    assert gw.complete(CompletionRequest(prompt("gamma"), "m")).raw_text == "any"


def test_response_sequences_repeat_last():
    mock = MockBackend(name="m").add("evaluator:*", ["first", "second"])
    gw = gateway_with(mock)
    got = [gw.complete(CompletionRequest(prompt(), "m", seed=3)).raw_text for _ in range(3)]
    assert got == ["first", "second", "second"]


def test_mock_from_file(tmp_path):
    path = tmp_path / "script.jsonl"
    path.write_text(json.dumps({"match": "evaluator:*", "response": "The score is [4]"}) + "\n\n", encoding="utf-8")
    mock = MockBackend.from_file(path, name="m")
    assert gateway_with(mock).complete(CompletionRequest(prompt(), "m")).raw_text == "The score is [4]"


def test_batch_preserves_order_with_mixed_outcomes():
    mock = MockBackend(name="m", delay=0.002)
    for i in range(10):
        if i % 3 == 0:
            mock.add(f"evaluator:contains:#{i}#", "x", fail_count=99, fail_status=404)
        else:
            mock.add(f"evaluator:contains:#{i}#", f"answer {i}")
    gw = gateway_with(mock, max_retries=1)
    reqs = [CompletionRequest(prompt(f"#{i}#"), "m", request_id=f"r{i}") for i in range(10)]
    results = gw.complete_batch(reqs, max_in_flight=4)
    assert [r.request_id for r in results] == [f"r{i}" for i in range(10)]
    for i, r in enumerate(results):
        assert r.ok == (i % 3 != 0)
        if r.ok:
            assert r.raw_text == f"answer {i}"


def test_batch_sequential_with_one_in_flight():
    mock = MockBackend(name="m", delay=0.003).add("evaluator:*", "x")
    gw = gateway_with(mock)
    gw.complete_batch([CompletionRequest(prompt(), "m") for _ in range(10)], max_in_flight=1)
    calls = sorted(mock.calls, key=lambda c: c["start"])
    assert all(a["end"] <= b["start"] for a, b in zip(calls, calls[1:]))
    assert mock.high_water == 1


def test_batch_high_water_mark():
    mock = MockBackend(name="m", delay=0.01).add("evaluator:*", "x")
    gw = gateway_with(mock)
    gw.complete_batch([CompletionRequest(prompt(), "m") for _ in range(10)], max_in_flight=4)
    assert 1 <= mock.high_water <= 4


def test_batch_rejects_bad_limit():
    gw = gateway_with(MockBackend(name="m"))
    with pytest.raises(ValueError):
        gw.complete_batch([CompletionRequest(prompt(), "m")], max_in_flight=0)
    assert gw.complete_batch([]) == []


def test_http_wire_format(monkeypatch):
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": "done"}}]})

    monkeypatch.setenv("TEST_KEY", "sekrit")
    from riskevidence.llm_gateway import HttpBackend

    cfg = BackendConfig("h", base_url="http://model.test/v1", model="m-1", api_key_env="TEST_KEY", max_tokens=64)
    backend = HttpBackend(cfg, transport=httpx.MockTransport(handler))
    gw = Gateway([cfg], backends={"h": backend}, sleep=lambda s: None)
    res = gw.complete(CompletionRequest(prompt(), "h", seed=9))
    assert res.raw_text == "done"
    (req,) = seen
    assert str(req.url) == "http://model.test/v1/chat/completions"
    assert req.headers["Authorization"] == "Bearer sekrit"
    body = json.loads(req.content)
    assert body == {"model": "m-1", "messages": [{"role": "user", "content": prompt().text}],
                    "temperature": 0.0, "max_tokens": 64, "seed": 9}


@pytest.mark.parametrize("status, attempts, ok", [(503, 3, True), (429, 3, True), (401, 1, False)])
def test_http_status_handling(status, attempts, ok):
    from riskevidence.llm_gateway import HttpBackend

    count = {"n": 0}

    def handler(request):
        count["n"] += 1
        if count["n"] < 3:
            return httpx.Response(status, text="nope")
        return httpx.Response(200, json={"choices": [{"message": {"content": "fine"}}]})

    cfg = BackendConfig("h", base_url="http://model.test", max_retries=3)
    gw = Gateway([cfg], backends={"h": HttpBackend(cfg, httpx.MockTransport(handler))}, sleep=lambda s: None)
    res = gw.complete(CompletionRequest(prompt(), "h"))
    assert (res.ok, res.attempt_count) == (ok, attempts)


def test_http_timeout_is_transient():
    from riskevidence.llm_gateway import HttpBackend

    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    cfg = BackendConfig("h", base_url="http://model.test", max_retries=1)
    gw = Gateway([cfg], backends={"h": HttpBackend(cfg, httpx.MockTransport(handler))}, sleep=lambda s: None)
    res = gw.complete(CompletionRequest(prompt(), "h"))
    assert not res.ok and res.attempt_count == 2 and "timeout" in res.error


def test_split_system_messages():
    msgs = build_messages(prompt(), split_system=True)
    assert msgs == [{"role": "system", "content": "You are a judge."}, {"role": "user", "content": "Score this."}]


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(2, "a", 2)
    assert 0 <= derive_seed(0, "x") < 2 ** 31


def test_backend_config_validation():
    with pytest.raises(ValueError):
        BackendConfig.from_dict({"name": "x", "colour": "red"})
    with pytest.raises(ValueError):
        BackendConfig("x", temperature=-1)
    with pytest.raises(ValueError):
        Gateway([BackendConfig("x", mock_script="a"), BackendConfig("x", mock_script="b")], backends={"x": None})


def test_no_conversation_state_between_calls():
    mock = MockBackend(name="m").add("evaluator:*", "x")
    gw = gateway_with(mock)
    p = prompt()
    for _ in range(3):
        gw.complete(CompletionRequest(p, "m"))
    assert {c["prompt_sha256"] for c in mock.calls} == {p.sha256}


def test_gateway_is_thread_safe():
    mock = MockBackend(name="m").add("evaluator:*", "x")
    gw = gateway_with(mock)
    results = []
    threads = [threading.Thread(target=lambda: results.append(gw.complete(CompletionRequest(prompt(), "m"))))
               for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(results) == 8 and all(r.ok for r in results)
    assert len(mock.calls) == 8
