"""Providers, retry gateway and token accounting."""

import json
import random
import time

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repaireval.engine import Conversation, Message
from repaireval.errors import (
    ConfigurationError,
    ProviderFailure,
    ScriptedGapError,
    TransientProviderError,
)
from repaireval.providers import (
    OPENAI_COMPATIBLE,
    SCRIPTED,
    Completion,
    DecodingParams,
    ModelSpec,
    OpenAICompatibleProvider,
    ProviderGateway,
    RetryPolicy,
    ScriptedProvider,
    TokenBucket,
    TokenUsage,
    load_script_file,
)

PARAMS = DecodingParams()


def conv(task_id="T/1", round_no=0, user="write code"):
    return Conversation(
        messages=(
            Message(role="system", content="sys"),
            Message(role="user", content=user),
        ),
        task_id=task_id,
        round=round_no,
    )


class TestDataTypes:
    def test_token_usage_add_and_billable(self):
        total = TokenUsage(1, 2, 3) + TokenUsage(10, 20, 30)
        assert total == TokenUsage(11, 22, 33)
        assert total.billable == 33

    def test_token_usage_rejects_negative(self):
        with pytest.raises(ValueError):
            TokenUsage(prompt_tokens=-1)

    def test_decoding_params_validation(self):
        with pytest.raises(ValueError):
            DecodingParams(temperature=-0.1)
        with pytest.raises(ValueError):
            DecodingParams(max_output_tokens=0)

    def test_model_spec_rules(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(provider="mystery", model_name="m")
        with pytest.raises(ConfigurationError):
            ModelSpec(provider=OPENAI_COMPATIBLE, model_name="m")
        with pytest.raises(ConfigurationError):
            ModelSpec(provider=SCRIPTED, model_name="m", endpoint="http://x")
        spec = ModelSpec(
            provider=OPENAI_COMPATIBLE,
            model_name="m",
            endpoint="http://x",
            request_overrides={"b": 2, "a": 1},
        )
        assert spec.request_overrides == (("a", 1), ("b", 2))


class TestRetryPolicy:
    def test_validation(self):
        with pytest.raises(ValueError):
            RetryPolicy(budget=0)
        with pytest.raises(ValueError):
            RetryPolicy(base_delay=2.0, max_delay=1.0)

    def test_delays_shape(self):
        policy = RetryPolicy(budget=7, base_delay=1.0, max_delay=30.0)
        delays = policy.delays(random.Random(42))
        assert len(delays) == 6
        assert delays == sorted(delays)
        assert all(0 <= d <= 31.0 for d in delays)
        # Same seed, same schedule.
        assert delays == policy.delays(random.Random(42))

    @settings(max_examples=100, deadline=None)
    @given(
        budget=st.integers(min_value=1, max_value=8),
        base=st.floats(min_value=0.0, max_value=3.0, allow_nan=False),
        extra=st.floats(min_value=0.0, max_value=40.0, allow_nan=False),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    def test_delays_nondecreasing_and_bounded(self, budget, base, extra, seed):
        policy = RetryPolicy(budget=budget, base_delay=base, max_delay=base + extra)
        delays = policy.delays(random.Random(seed))
        assert len(delays) == budget - 1
        assert all(b >= a for a, b in zip(delays, delays[1:]))
        assert all(d <= policy.max_delay + policy.base_delay for d in delays)


class TestScriptedProvider:
    def test_keyed_replay_and_surrogate_usage(self):
        provider = ScriptedProvider({("T/1", 0): "abcde"})
        completion = provider.complete(conv(user="u"), PARAMS)
        assert completion.text == "abcde"
        # prompt "sys" + "u" = 4 bytes -> 1 token; completion 5 bytes -> 2.
        assert completion.usage == TokenUsage(prompt_tokens=1, completion_tokens=2)

    def test_gap_raises(self):
        provider = ScriptedProvider({})
        with pytest.raises(ScriptedGapError):
            provider.complete(conv(), PARAMS)

    def test_transient_countdown(self):
        provider = ScriptedProvider({("T/1", 0): "ok"}, transient_failures={("T/1", 0): 2})
        for _ in range(2):
            with pytest.raises(TransientProviderError):
                provider.complete(conv(), PARAMS)
        assert provider.complete(conv(), PARAMS).text == "ok"

    def test_permanent_failure(self):
        provider = ScriptedProvider({("T/1", 0): "ok"}, transient_failures={("T/1", 0): -1})
        for _ in range(5):
            with pytest.raises(TransientProviderError):
                provider.complete(conv(), PARAMS)

    def test_strategy_overrides(self):
        base = {("T/1", 1): "base"}
        overrides = {"cot": {("T/1", 1): "cot text"}}
        plain = ScriptedProvider(base, strategy_overrides=overrides, strategy=None)
        cot = ScriptedProvider(base, strategy_overrides=overrides, strategy="cot")
        assert plain.complete(conv(round_no=1), PARAMS).text == "base"
        assert cot.complete(conv(round_no=1), PARAMS).text == "cot text"

    def test_load_script_file(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(
            json.dumps(
                {
                    "completions": [{"task_id": "T/1", "round": 0, "text": "a"}],
                    "failures": [{"task_id": "T/2", "round": 0, "count": 1}],
                    "strategies": {"cot": [{"task_id": "T/1", "round": 0, "text": "b"}]},
                }
            ),
            encoding="utf-8",
        )
        provider = load_script_file(path)
        assert provider.complete(conv(), PARAMS).text == "a"
        cot = load_script_file(path, strategy="cot")
        assert cot.complete(conv(), PARAMS).text == "b"

    def test_load_script_file_errors(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_script_file(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("[1, 2]", encoding="utf-8")
        with pytest.raises(ConfigurationError, match="JSON object"):
            load_script_file(bad)
        entry = tmp_path / "entry.json"
        entry.write_text('{"completions": [{"task_id": "x"}]}', encoding="utf-8")
        with pytest.raises(ConfigurationError, match="bad completions entry"):
            load_script_file(entry)


def _openai_spec(**overrides) -> ModelSpec:
    fields = {
        "provider": OPENAI_COMPATIBLE,
        "model_name": "test-model",
        "endpoint": "https://api.example.test/v1/chat/completions",
        "credential_ref": "TEST_API_KEY",
    }
    fields.update(overrides)
    return ModelSpec(**fields)


class TestOpenAICompatible:
    def test_missing_credential_fails_at_construction(self, monkeypatch):
        monkeypatch.delenv("TEST_API_KEY", raising=False)
        with pytest.raises(ConfigurationError, match="TEST_API_KEY"):
            OpenAICompatibleProvider(_openai_spec())

    def test_request_and_response(self, monkeypatch):
        monkeypatch.setenv("TEST_API_KEY", "sekret-token")
        captured = {}

        def handler(request):
            captured["request"] = request
            return httpx.Response(
                200,
                json={
                    "choices": [{"message": {"content": "def f(): pass"}}],
                    "usage": {
                        "prompt_tokens": 10,
                        "completion_tokens": 5,
                        "completion_tokens_details": {"reasoning_tokens": 3},
                    },
                },
            )

        spec = _openai_spec(request_overrides={"reasoning_effort": "low"})
        provider = OpenAICompatibleProvider(spec, transport=httpx.MockTransport(handler))
        completion = provider.complete(conv(user="solve it"), DecodingParams(0.7, 512))
        assert completion.text == "def f(): pass"
        assert completion.usage == TokenUsage(10, 5, 3)

        request = captured["request"]
        assert str(request.url) == spec.endpoint
        assert request.headers["authorization"] == "Bearer sekret-token"
        body = json.loads(request.content)
        assert body["model"] == "test-model"
        assert body["temperature"] == 0.7
        assert body["max_tokens"] == 512
        assert body["reasoning_effort"] == "low"
        assert body["messages"] == [
            {"role": "system", "content": "sys"},
            {"role": "user", "content": "solve it"},
        ]
        assert "sekret-token" not in request.content.decode("utf-8")

    def test_reasoning_tokens_top_level_fallback(self, monkeypatch):
        monkeypatch.setenv("TEST_API_KEY", "k")

        def handler(request):
            return httpx.Response(
                200,
                json={
                    "choices": [{"message": {"content": "x"}}],
                    "usage": {"prompt_tokens": 1, "completion_tokens": 2, "reasoning_tokens": 4},
                },
            )

        provider = OpenAICompatibleProvider(
            _openai_spec(), transport=httpx.MockTransport(handler)
        )
        assert provider.complete(conv(), PARAMS).usage.reasoning_tokens == 4

    def test_null_content_and_missing_usage(self, monkeypatch):
        monkeypatch.setenv("TEST_API_KEY", "k")

        def handler(request):
            return httpx.Response(200, json={"choices": [{"message": {"content": None}}]})

        provider = OpenAICompatibleProvider(
            _openai_spec(), transport=httpx.MockTransport(handler)
        )
        completion = provider.complete(conv(), PARAMS)
        assert completion.text == ""
        assert completion.usage == TokenUsage()

    @pytest.mark.parametrize(
        "status,exc",
        [
            (401, ConfigurationError),
            (403, ConfigurationError),
            (429, TransientProviderError),
            (500, TransientProviderError),
            (503, TransientProviderError),
            (418, ProviderFailure),
        ],
    )
    def test_status_mapping(self, monkeypatch, status, exc):
        monkeypatch.setenv("TEST_API_KEY", "k")
        provider = OpenAICompatibleProvider(
            _openai_spec(),
            transport=httpx.MockTransport(lambda request: httpx.Response(status, text="nope")),
        )
        with pytest.raises(exc):
            provider.complete(conv(), PARAMS)

    def test_transport_error_is_transient(self, monkeypatch):
        monkeypatch.setenv("TEST_API_KEY", "k")

        def handler(request):
            raise httpx.ConnectError("refused")

        provider = OpenAICompatibleProvider(
            _openai_spec(), transport=httpx.MockTransport(handler)
        )
        with pytest.raises(TransientProviderError):
            provider.complete(conv(), PARAMS)

    def test_malformed_payload_is_transient(self, monkeypatch):
        monkeypatch.setenv("TEST_API_KEY", "k")
        provider = OpenAICompatibleProvider(
            _openai_spec(),
            transport=httpx.MockTransport(
                lambda request: httpx.Response(200, json={"unexpected": True})
            ),
        )
        with pytest.raises(TransientProviderError):
            provider.complete(conv(), PARAMS)


class _FlakyProvider:
    def __init__(self, failures, error=TransientProviderError):
        self.failures = failures
        self.error = error
        self.calls = 0

    def complete(self, conversation, params):
        self.calls += 1
        if self.calls <= self.failures:
            raise self.error("injected")
        return Completion(text="ok", usage=TokenUsage())


class TestGateway:
    def test_retries_then_succeeds(self):
        sleeps = []
        gateway = ProviderGateway(
            _FlakyProvider(2),
            retry=RetryPolicy(budget=3, base_delay=1.0),
            sleep=sleeps.append,
            rng=random.Random(0),
        )
        completion = gateway.generate(conv(), PARAMS)
        assert completion.attempts_made == 3
        assert len(sleeps) == 2
        assert sleeps == sorted(sleeps)

    def test_budget_exhaustion(self):
        sleeps = []
        gateway = ProviderGateway(
            _FlakyProvider(99),
            retry=RetryPolicy(budget=4, base_delay=0.5),
            sleep=sleeps.append,
            rng=random.Random(0),
        )
        with pytest.raises(ProviderFailure):
            gateway.generate(conv(), PARAMS)
        assert len(sleeps) == 3

    def test_non_transient_failure_not_retried(self):
        provider = _FlakyProvider(99, error=ProviderFailure)
        gateway = ProviderGateway(provider, retry=RetryPolicy(budget=5), sleep=lambda s: None)
        with pytest.raises(ProviderFailure):
            gateway.generate(conv(), PARAMS)
        assert provider.calls == 1

    def test_configuration_error_not_retried(self):
        provider = _FlakyProvider(99, error=ConfigurationError)
        gateway = ProviderGateway(provider, retry=RetryPolicy(budget=5), sleep=lambda s: None)
        with pytest.raises(ConfigurationError):
            gateway.generate(conv(), PARAMS)
        assert provider.calls == 1

    def test_conversation_shape_enforced(self):
        gateway = ProviderGateway(_FlakyProvider(0))
        bad = Conversation(
            messages=(Message(role="user", content="hi"),), task_id="T/1", round=0
        )
        with pytest.raises(ValueError):
            gateway.generate(bad, PARAMS)
        two_systems = Conversation(
            messages=(
                Message(role="system", content="a"),
                Message(role="system", content="b"),
            ),
            task_id="T/1",
            round=0,
        )
        with pytest.raises(ValueError):
            gateway.generate(two_systems, PARAMS)


class TestTokenBucket:
    def test_validation(self):
        with pytest.raises(ValueError):
            TokenBucket(0)

    def test_sleeps_once_capacity_drained(self):
        sleeps = []

        def sleeping(seconds):
            sleeps.append(seconds)
            time.sleep(seconds)

        bucket = TokenBucket(1200, sleep=sleeping)
        for _ in range(1201):
            bucket.acquire()
        assert sleeps
        assert all(0 < s <= 0.2 for s in sleeps)
