"""Model providers behind one gateway.

Two provider kinds: an OpenAI-compatible chat-completions HTTP client, and a
scripted provider that replays canned completions keyed by (task_id, round)
for offline tests and reproduction runs. The gateway wraps either with retry,
backoff and rate limiting so both paths exercise identical plumbing.

Credentials are read from a named environment variable only; they are never
accepted as flags or file contents and never logged.
"""

from __future__ import annotations

import json
import logging
import math
import random
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Mapping

import httpx

from .errors import (
    ConfigurationError,
    ProviderFailure,
    ScriptedGapError,
    TransientProviderError,
)

if TYPE_CHECKING:
    from .engine import Conversation

logger = logging.getLogger(__name__)

OPENAI_COMPATIBLE = "openai_compatible"
SCRIPTED = "scripted"

PROVIDER_KINDS = (OPENAI_COMPATIBLE, SCRIPTED)

# Surrogate token accounting for scripted runs: bytes divided by four,
# rounded up, so token tables stay populated offline.
SURROGATE_BYTES_PER_TOKEN = 4


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    reasoning_tokens: int = 0

    def __post_init__(self) -> None:
        for name in ("prompt_tokens", "completion_tokens", "reasoning_tokens"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            prompt_tokens=self.prompt_tokens + other.prompt_tokens,
            completion_tokens=self.completion_tokens + other.completion_tokens,
            reasoning_tokens=self.reasoning_tokens + other.reasoning_tokens,
        )

    @property
    def billable(self) -> int:
        """Prompt plus completion tokens; reasoning tokens reported apart."""
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_output_tokens: int = 4096

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class Completion:
    text: str
    usage: TokenUsage
    attempts_made: int = 1


@dataclass(frozen=True)
class ModelSpec:
    provider: str
    model_name: str
    endpoint: str | None = None
    credential_ref: str | None = None
    request_overrides: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self) -> None:
        if self.provider not in PROVIDER_KINDS:
            raise ConfigurationError(f"unknown provider {self.provider!r}")
        if self.provider == OPENAI_COMPATIBLE and not self.endpoint:
            raise ConfigurationError("openai_compatible provider requires an endpoint")
        if self.provider != OPENAI_COMPATIBLE and self.endpoint:
            raise ConfigurationError("endpoint is only meaningful for openai_compatible")
        if isinstance(self.request_overrides, dict):
            object.__setattr__(
                self, "request_overrides", tuple(sorted(self.request_overrides.items()))
            )


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff with jitter; delays never decrease."""

    budget: int = 5
    base_delay: float = 1.0
    max_delay: float = 30.0

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ValueError("retry budget must be at least 1")
        if self.base_delay < 0 or self.max_delay < self.base_delay:
            raise ValueError("delays must satisfy 0 <= base_delay <= max_delay")

    def delays(self, rng: random.Random) -> list[float]:
        """Sleep lengths between the budgeted attempts (budget - 1 values)."""
        out: list[float] = []
        last = 0.0
        for attempt in range(self.budget - 1):
            backoff = min(self.base_delay * (2**attempt), self.max_delay)
            delay = backoff + rng.uniform(0, self.base_delay)
            last = max(last, delay)
            out.append(last)
        return out


class TokenBucket:
    """Requests-per-minute limiter shared by all workers of one provider."""

    def __init__(self, requests_per_minute: float, sleep: Callable[[float], None] = time.sleep):
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        self._capacity = requests_per_minute
        self._rate = requests_per_minute / 60.0
        self._tokens = requests_per_minute
        self._stamp = time.monotonic()
        self._lock = threading.Lock()
        self._sleep = sleep

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self._capacity, self._tokens + (now - self._stamp) * self._rate)
                self._stamp = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self._rate
            self._sleep(wait)


def _check_conversation(conversation: "Conversation") -> None:
    roles = [message.role for message in conversation.messages]
    if not roles or roles[0] != "system" or roles.count("system") != 1:
        raise ValueError("conversation must begin with exactly one system message")


def _prompt_bytes(conversation: "Conversation") -> int:
    return sum(len(message.content.encode("utf-8")) for message in conversation.messages)


def _surrogate_tokens(byte_count: int) -> int:
    return math.ceil(byte_count / SURROGATE_BYTES_PER_TOKEN)


class ScriptedProvider:
    """Replays a fixed mapping from (task_id, round) to completion text.

    `transient_failures` injects that many retryable failures before an entry
    succeeds; a count of -1 fails forever, which after the retry budget turns
    into an api_error in the transcript. `strategy` selects an optional
    override table so one script file can serve an ablation sweep.
    """

    def __init__(
        self,
        script: Mapping[tuple[str, int], str],
        transient_failures: Mapping[tuple[str, int], int] | None = None,
        strategy_overrides: Mapping[str, Mapping[tuple[str, int], str]] | None = None,
        strategy: str | None = None,
    ):
        self._script = dict(script)
        self._failures = dict(transient_failures or {})
        self._overrides = dict((strategy_overrides or {}).get(strategy or "", {}))
        self._lock = threading.Lock()

    def complete(self, conversation: "Conversation", params: DecodingParams) -> Completion:
        key = (conversation.task_id, conversation.round)
        with self._lock:
            remaining = self._failures.get(key, 0)
            if remaining != 0:
                if remaining > 0:
                    self._failures[key] = remaining - 1
                raise TransientProviderError(f"scripted transient failure for {key}")
            if key in self._overrides:
                text = self._overrides[key]
            elif key in self._script:
                text = self._script[key]
            else:
                raise ScriptedGapError(f"script has no completion for {key}")
        usage = TokenUsage(
            prompt_tokens=_surrogate_tokens(_prompt_bytes(conversation)),
            completion_tokens=_surrogate_tokens(len(text.encode("utf-8"))),
            reasoning_tokens=0,
        )
        return Completion(text=text, usage=usage)


def _script_entries(items: Any, path: Path, where: str) -> dict[tuple[str, int], str]:
    table: dict[tuple[str, int], str] = {}
    for item in items:
        try:
            key = (str(item["task_id"]), int(item["round"]))
            table[key] = str(item["text"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"{path}: bad {where} entry {item!r}: {exc}") from exc
    return table


def load_script_file(path: str | Path, strategy: str | None = None) -> ScriptedProvider:
    """Build a ScriptedProvider from a JSON script file.

    Layout: {"completions": [{"task_id", "round", "text"}...],
             "failures": [{"task_id", "round", "count"}...],
             "strategies": {"<name>": [{"task_id", "round", "text"}...]}}
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as exc:
        raise ConfigurationError(f"cannot open script {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: malformed script JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: script must be a JSON object")
    script = _script_entries(data.get("completions", []), path, "completions")
    failures: dict[tuple[str, int], int] = {}
    for item in data.get("failures", []):
        try:
            failures[(str(item["task_id"]), int(item["round"]))] = int(item["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"{path}: bad failures entry {item!r}: {exc}") from exc
    overrides = {
        name: _script_entries(entries, path, f"strategies[{name}]")
        for name, entries in (data.get("strategies", {}) or {}).items()
    }
    return ScriptedProvider(
        script, transient_failures=failures, strategy_overrides=overrides, strategy=strategy
    )


class OpenAICompatibleProvider:
    """Chat-completions dialect over HTTP.

    The endpoint is the full completions URL. Provider-specific request
    switches (reasoning toggles and the like) arrive as ModelSpec
    request_overrides merged into the JSON body, not as code forks.
    """

    def __init__(self, spec: ModelSpec, timeout: float = 120.0, transport: httpx.BaseTransport | None = None):
        if spec.provider != OPENAI_COMPATIBLE:
            raise ConfigurationError("OpenAICompatibleProvider requires an openai_compatible spec")
        if not spec.credential_ref:
            raise ConfigurationError("missing credential environment variable name")
        import os

        token = os.environ.get(spec.credential_ref)
        if not token:
            raise ConfigurationError(
                f"credential environment variable {spec.credential_ref!r} is not set"
            )
        self._spec = spec
        self._token = token
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def complete(self, conversation: "Conversation", params: DecodingParams) -> Completion:
        body: dict[str, Any] = {
            "model": self._spec.model_name,
            "messages": [
                {"role": message.role, "content": message.content}
                for message in conversation.messages
            ],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        body.update(dict(self._spec.request_overrides))
        logger.debug(
            "request task=%s round=%s body=%s",
            conversation.task_id,
            conversation.round,
            json.dumps(body, ensure_ascii=False)[:2000],
        )
        try:
            response = self._client.post(
                self._spec.endpoint,
                json=body,
                headers={"Authorization": f"Bearer {self._token}"},
            )
        except httpx.HTTPError as exc:
            raise TransientProviderError(f"transport failure: {exc}") from exc
        if response.status_code in (401, 403):
            raise ConfigurationError(
                f"provider rejected credentials (HTTP {response.status_code})"
            )
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientProviderError(f"HTTP {response.status_code}: {response.text[:200]}")
        if response.status_code != 200:
            raise ProviderFailure(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            payload = response.json()
            text = payload["choices"][0]["message"]["content"] or ""
        except (ValueError, LookupError, TypeError) as exc:
            raise TransientProviderError(f"malformed completion payload: {exc}") from exc
        usage_info = payload.get("usage") or {}
        details = usage_info.get("completion_tokens_details") or {}
        reasoning = details.get("reasoning_tokens", usage_info.get("reasoning_tokens", 0)) or 0
        usage = TokenUsage(
            prompt_tokens=int(usage_info.get("prompt_tokens", 0) or 0),
            completion_tokens=int(usage_info.get("completion_tokens", 0) or 0),
            reasoning_tokens=int(reasoning),
        )
        logger.debug(
            "response task=%s round=%s tokens=%s/%s",
            conversation.task_id,
            conversation.round,
            usage.prompt_tokens,
            usage.completion_tokens,
        )
        return Completion(text=text, usage=usage)


class ProviderGateway:
    """Retry, backoff and rate limiting around a provider.

    Transient failures are retried up to the budget with nondecreasing
    delays; an exhausted budget raises ProviderFailure, which the engine
    records as an api_error outcome. Configuration problems (bad or rejected
    credentials) are fatal immediately.
    """

    def __init__(
        self,
        provider: Any,
        retry: RetryPolicy = RetryPolicy(),
        requests_per_minute: float | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        self.provider = provider
        self.retry = retry
        self._bucket = (
            TokenBucket(requests_per_minute, sleep=sleep) if requests_per_minute else None
        )
        self._sleep = sleep
        self._rng = rng or random.Random()

    def generate(self, conversation: "Conversation", params: DecodingParams) -> Completion:
        _check_conversation(conversation)
        delays = self.retry.delays(self._rng)
        last_error: Exception | None = None
        for attempt in range(1, self.retry.budget + 1):
            if self._bucket is not None:
                self._bucket.acquire()
            try:
                completion = self.provider.complete(conversation, params)
                return replace(completion, attempts_made=attempt)
            except TransientProviderError as exc:
                last_error = exc
                logger.warning(
                    "transient provider failure (attempt %d/%d) task=%s round=%s: %s",
                    attempt,
                    self.retry.budget,
                    conversation.task_id,
                    conversation.round,
                    exc,
                )
                if attempt < self.retry.budget:
                    self._sleep(delays[attempt - 1])
        raise ProviderFailure(
            f"no completion after {self.retry.budget} attempts: {last_error}"
        )
