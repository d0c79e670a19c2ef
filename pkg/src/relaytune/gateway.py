"""Provider-agnostic text-completion access.

Bounded-concurrency fan-out, retry with full-jitter exponential backoff, an
optional request-rate cap, a usage ledger for the cost model, and a
deterministic mock provider so every pipeline stage runs offline.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .errors import AuthError, StageError
from .textutil import count_tokens, pseudo_text, stable_seed

logger = logging.getLogger(__name__)


class ProviderError(StageError):
    """Raised by providers; ``retryable`` drives the gateway's retry loop."""

    retryable = False


class TransportError(ProviderError):
    retryable = True
    error_class = "transport"


class RateLimitError(ProviderError):
    retryable = True
    error_class = "rate_limit"


class ContentError(ProviderError):
    retryable = False
    error_class = "content"


class UnknownModelError(ProviderError):
    retryable = False
    error_class = "unknown_model"


@dataclass(frozen=True)
class CompletionRequest:
    model_id: str
    prompt: str
    max_new_tokens: int = 1024
    temperature: float = 0.7
    top_p: float = 0.95
    stop: tuple[str, ...] | None = None
    request_tag: str = ""
    seed: int | None = None

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")


@dataclass
class CompletionResult:
    text: str
    input_tokens: int
    output_tokens: int
    provider: str
    latency_ms: int = 0
    attempts: int = 1


@dataclass
class CompletionFailure:
    """Per-position terminal failure slot returned by ``complete_many``."""

    error_class: str
    message: str
    attempts: int = 1


class Provider(Protocol):
    name: str

    def complete(self, request: CompletionRequest) -> CompletionResult: ...


@dataclass
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 0.5
    max_delay: float = 30.0
    sleep: Callable[[float], None] = time.sleep
    rng: random.Random = field(default_factory=random.Random)

    def backoff(self, attempt: int) -> float:
        # Full jitter: uniform in [0, min(cap, base * 2^(attempt-1))].
        return self.rng.uniform(0.0, min(self.max_delay, self.base_delay * 2 ** (attempt - 1)))


class UsageLedger:
    """Append-only token accounting, one JSON line per completed request."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._entries: list[dict] = []

    def record(self, request_tag: str, model_id: str, input_tokens: int,
               output_tokens: int) -> None:
        entry = {"request_tag": request_tag, "model_id": model_id,
                 "input_tokens": input_tokens, "output_tokens": output_tokens}
        with self._lock:
            self._entries.append(entry)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def entries(self) -> list[dict]:
        with self._lock:
            return list(self._entries)

    def totals(self, model_id: str | None = None,
               tag_prefix: str = "") -> tuple[int, int]:
        """(input_tokens, output_tokens) summed over matching entries."""
        tin = tout = 0
        for e in self.entries():
            if model_id is not None and e["model_id"] != model_id:
                continue
            if tag_prefix and not e["request_tag"].startswith(tag_prefix):
                continue
            tin += e["input_tokens"]
            tout += e["output_tokens"]
        return tin, tout


Responder = Callable[[CompletionRequest, "re.Match[str] | None"], str]


class ScriptedOutcomes:
    """Queue of canned outcomes; exceptions in the queue are raised in turn.

    Once the queue drains, the last string outcome repeats (or the fallback
    applies if the queue held only exceptions).
    """

    def __init__(self, outcomes: list[str | Exception]):
        self._outcomes = list(outcomes)
        self._lock = threading.Lock()
        self._last: str | None = next(
            (o for o in reversed(outcomes) if isinstance(o, str)), None)

    def __call__(self, request: CompletionRequest, match=None) -> str:
        with self._lock:
            if self._outcomes:
                outcome = self._outcomes.pop(0)
            else:
                outcome = self._last
        if isinstance(outcome, Exception):
            raise outcome
        if outcome is None:
            raise ContentError("scripted outcomes exhausted")
        return outcome


class MockProvider:
    """Deterministic offline provider.

    Output is a pure function of (provider seed, prompt, decoding params,
    request seed). Tests and offline runs register prompt-pattern rules to
    script judges, synthesizers, and failure sequences. The provider tracks
    per-call bookkeeping and a peak-concurrency probe.
    """

    def __init__(self, seed: int = 0, name: str = "mock", settle_s: float = 0.0):
        self.name = name
        self.seed = seed
        self.settle_s = settle_s
        self._rules: list[tuple[re.Pattern[str], Responder]] = []
        self._lock = threading.Lock()
        self.calls: list[str] = []
        self._in_flight = 0
        self.peak_in_flight = 0

    def add_rule(self, pattern: str, responder: Responder | str) -> None:
        if isinstance(responder, str):
            canned = responder
            responder = lambda request, match, _c=canned: _c
        self._rules.append((re.compile(pattern, re.DOTALL), responder))

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            self.calls.append(request.request_tag)
            self._in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self._in_flight)
        try:
            if self.settle_s:
                time.sleep(self.settle_s)
            text = self._render(request)
        finally:
            with self._lock:
                self._in_flight -= 1
        return CompletionResult(
            text=text,
            input_tokens=count_tokens(request.prompt),
            output_tokens=count_tokens(text),
            provider=self.name,
        )

    def _render(self, request: CompletionRequest) -> str:
        for pattern, responder in self._rules:
            match = pattern.search(request.prompt)
            if match:
                return responder(request, match)
        # Greedy decoding ignores the request seed; sampled decoding folds it in.
        decode_seed = request.seed if request.temperature > 0 else None
        h = stable_seed(self.seed, request.prompt, request.temperature,
                        request.top_p, request.max_new_tokens, decode_seed)
        return pseudo_text(h, min(request.max_new_tokens, 16))


class HttpProvider:
    """Chat-completion HTTP adapter (OpenAI-style endpoint shape).

    The API key is read from an environment variable at call time so
    credentials never live in config or state files.
    """

    def __init__(self, name: str, base_url: str, model: str | None = None,
                 api_key_env: str | None = None, timeout: float = 120.0,
                 transport: httpx.BaseTransport | None = None):
        self.name = name
        self.model = model
        self.api_key_env = api_key_env
        self._client = httpx.Client(base_url=base_url, timeout=timeout,
                                    transport=transport)

    def complete(self, request: CompletionRequest) -> CompletionResult:
        headers = {}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env, "")
            if not key:
                raise AuthError(
                    f"provider {self.name!r} requires env var {self.api_key_env}")
            headers["Authorization"] = f"Bearer {key}"
        payload: dict = {
            "model": self.model or request.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
            "top_p": request.top_p,
        }
        if request.stop:
            payload["stop"] = list(request.stop)
        if request.seed is not None:
            payload["seed"] = request.seed
        started = time.monotonic()
        try:
            resp = self._client.post("/chat/completions", json=payload,
                                     headers=headers)
        except httpx.TransportError as exc:
            raise TransportError(f"{self.name}: {exc}") from exc
        latency_ms = int((time.monotonic() - started) * 1000)
        if resp.status_code == 429:
            raise RateLimitError(f"{self.name}: rate limited")
        if resp.status_code in (401, 403):
            raise AuthError(f"{self.name}: credentials rejected")
        if resp.status_code >= 500:
            raise TransportError(f"{self.name}: server error {resp.status_code}")
        if resp.status_code >= 400:
            raise ContentError(f"{self.name}: {resp.status_code} {resp.text[:200]}")
        body = resp.json()
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ContentError(f"{self.name}: malformed completion body") from None
        usage = body.get("usage") or {}
        return CompletionResult(
            text=text,
            input_tokens=int(usage.get("prompt_tokens", count_tokens(request.prompt))),
            output_tokens=int(usage.get("completion_tokens", count_tokens(text))),
            provider=self.name,
            latency_ms=latency_ms,
        )


class _RateGate:
    """Minimum-interval spacing between dispatched requests."""

    def __init__(self, requests_per_second: float):
        self._interval = 1.0 / requests_per_second
        self._lock = threading.Lock()
        self._next_at = 0.0

    def acquire(self) -> None:
        with self._lock:
            now = time.monotonic()
            wait = self._next_at - now
            self._next_at = max(now, self._next_at) + self._interval
        if wait > 0:
            time.sleep(wait)


class Gateway:
    """Routes completion requests to registered providers.

    Shareable across threads; the in-flight limit, rate gate, and usage
    ledger are internally synchronized. Only the final attempt of a retried
    request is recorded in the ledger.
    """

    def __init__(self, retry: RetryPolicy | None = None,
                 ledger: UsageLedger | None = None,
                 requests_per_second: float | None = None):
        self.retry = retry or RetryPolicy()
        self.ledger = ledger or UsageLedger()
        self._providers: dict[str, Provider] = {}
        self._gate = _RateGate(requests_per_second) if requests_per_second else None

    def register(self, model_id: str, provider: Provider) -> None:
        self._providers[model_id] = provider

    def provider_for(self, model_id: str) -> Provider:
        try:
            return self._providers[model_id]
        except KeyError:
            raise UnknownModelError(f"no provider registered for model {model_id!r}") from None

    def complete(self, request: CompletionRequest) -> CompletionResult:
        provider = self.provider_for(request.model_id)
        last_exc: Exception | None = None
        for attempt in range(1, self.retry.max_attempts + 1):
            if self._gate is not None:
                self._gate.acquire()
            started = time.monotonic()
            try:
                result = provider.complete(request)
            except AuthError as exc:
                exc.attempts = attempt
                raise
            except ProviderError as exc:
                exc.attempts = attempt
                last_exc = exc
                if not exc.retryable or attempt == self.retry.max_attempts:
                    raise
                delay = self.retry.backoff(attempt)
                logger.debug("retrying %s after %s (attempt %d): %s",
                             request.request_tag, delay, attempt, exc)
                self.retry.sleep(delay)
                continue
            result.attempts = attempt
            if not result.latency_ms:
                result.latency_ms = int((time.monotonic() - started) * 1000)
            self.ledger.record(request.request_tag, request.model_id,
                               result.input_tokens, result.output_tokens)
            return result
        raise last_exc  # unreachable; loop always returns or raises

    def complete_many(self, requests: list[CompletionRequest],
                      max_in_flight: int = 8) -> list[CompletionResult | CompletionFailure]:
        """Positionally aligned results; per-item terminal failures in slots."""
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

        def one(request: CompletionRequest) -> CompletionResult | CompletionFailure:
            try:
                return self.complete(request)
            except (ProviderError, AuthError) as exc:
                return CompletionFailure(error_class=exc.error_class, message=str(exc),
                                         attempts=getattr(exc, "attempts", 1))

        if len(requests) <= 1 or max_in_flight == 1:
            return [one(r) for r in requests]
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            return list(pool.map(one, requests))
