"""Uniform completion interface: an HTTP client speaking the de-facto open
completion API (POST JSON {model, prompt, max_tokens, temperature, top_p,
stop}), plus deterministic scripted doubles for tests and dry runs.

Greedy decoding is encoded as temperature 0 on the wire, which every common
inference server honors. Backends are safe for concurrent calls.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Mapping, Protocol, Sequence

import requests


class BackendError(Exception):
    """Base class for completion-backend failures."""


class TransportError(BackendError):
    pass


class CompletionTimeout(BackendError):
    pass


class HttpStatusError(BackendError):
    def __init__(self, code: int, detail: str = "") -> None:
        super().__init__(f"HTTP {code}{': ' + detail if detail else ''}")
        self.code = code


class MalformedResponseError(BackendError):
    pass


class ScriptExhausted(BackendError):
    pass


class DecodingMode(str, Enum):
    GREEDY = "greedy"
    NUCLEUS = "nucleus"


@dataclass(frozen=True)
class DecodingParams:
    """Decoding policy for one completion call.

    ``top_p`` and ``temperature`` only apply to nucleus sampling; greedy
    ignores them entirely. ``seed`` is forwarded to servers that support
    reproducible sampling.
    """

    mode: DecodingMode = DecodingMode.GREEDY
    top_p: float | None = None
    temperature: float = 1.0
    max_new_tokens: int = 128
    stop_sequences: tuple[str, ...] = ()
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.mode is DecodingMode.NUCLEUS:
            if self.top_p is None or not (0.0 < self.top_p <= 1.0):
                raise ValueError(f"nucleus sampling requires 0 < top_p <= 1, got {self.top_p}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")

    def describe(self) -> str:
        if self.mode is DecodingMode.GREEDY:
            return "greedy"
        return f"nucleus(p={self.top_p})"


@dataclass(frozen=True)
class CompletionResult:
    text: str
    usage: dict | None = None
    latency: float = 0.0


@dataclass(frozen=True)
class BackendConfig:
    name: str
    endpoint_url: str
    model: str
    api_style: str = "completions-v1"
    auth_env: str | None = None
    timeout: float = 60.0
    retries: int = 2
    backoff_base: float = 0.5
    max_concurrency: int = 4

    def __post_init__(self) -> None:
        if not self.endpoint_url.startswith(("http://", "https://")):
            raise ValueError(f"endpoint_url is not a well-formed URL: {self.endpoint_url!r}")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")


class CompletionBackend(Protocol):
    def complete(
        self, prompt: str, params: DecodingParams, *, tag: str | None = None
    ) -> CompletionResult: ...


def apply_stop_sequences(text: str, stop_sequences: Sequence[str]) -> str:
    """Truncate at the earliest occurrence of any stop sequence."""
    cut = len(text)
    for stop in stop_sequences:
        idx = text.find(stop)
        if idx >= 0:
            cut = min(cut, idx)
    return text[:cut]


def build_payload(config: BackendConfig, prompt: str, params: DecodingParams) -> dict:
    """The wire payload, kept as a pure function so its bytes are testable."""
    payload: dict = {
        "model": config.model,
        "prompt": prompt,
        "max_tokens": params.max_new_tokens,
    }
    if params.mode is DecodingMode.GREEDY:
        payload["temperature"] = 0.0
    else:
        payload["temperature"] = params.temperature
        payload["top_p"] = params.top_p
    if params.stop_sequences:
        payload["stop"] = list(params.stop_sequences)
    if params.seed is not None:
        payload["seed"] = params.seed
    return payload


class HttpCompletionBackend:
    """Client for an HTTP completion endpoint with bounded retries.

    Transport failures, timeouts, 429 and 5xx responses are retried with
    exponential backoff up to ``config.retries`` additional attempts; other
    errors fail fast. Concurrent requests are capped per backend.
    """

    def __init__(self, config: BackendConfig, session: requests.Session | None = None) -> None:
        self.config = config
        self._session = session or requests.Session()
        self._semaphore = threading.BoundedSemaphore(config.max_concurrency)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.auth_env:
            token = os.environ.get(self.config.auth_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(
        self, prompt: str, params: DecodingParams, *, tag: str | None = None
    ) -> CompletionResult:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        body = json.dumps(
            build_payload(self.config, prompt, params), ensure_ascii=False, sort_keys=True
        ).encode("utf-8")
        last_error: BackendError | None = None
        for attempt in range(self.config.retries + 1):
            if attempt > 0:
                time.sleep(self.config.backoff_base * (2 ** (attempt - 1)))
            started = time.monotonic()
            try:
                with self._semaphore:
                    response = self._session.post(
                        self.config.endpoint_url,
                        data=body,
                        headers=self._headers(),
                        timeout=self.config.timeout,
                    )
            except requests.Timeout as exc:
                last_error = CompletionTimeout(str(exc))
                continue
            except requests.RequestException as exc:
                last_error = TransportError(str(exc))
                continue
            latency = time.monotonic() - started
            if response.status_code == 429 or response.status_code >= 500:
                last_error = HttpStatusError(response.status_code, response.text[:200])
                continue
            if response.status_code != 200:
                raise HttpStatusError(response.status_code, response.text[:200])
            try:
                data = response.json()
                text = data["choices"][0]["text"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise MalformedResponseError(
                    f"unexpected completion response shape: {exc}"
                ) from exc
            if not isinstance(text, str):
                raise MalformedResponseError("completion text is not a string")
            return CompletionResult(
                text=apply_stop_sequences(text, params.stop_sequences),
                usage=data.get("usage"),
                latency=latency,
            )
        assert last_error is not None
        raise last_error


@dataclass
class ScriptedCall:
    prompt: str
    params: DecodingParams
    tag: str | None


class ScriptedBackend:
    """Deterministic in-process backend for tests and dry runs.

    Exactly one script form must be given:

    - ``responses``: consumed in call order; raises :class:`ScriptExhausted`
      when empty.
    - ``by_state``: keyed by the engine's state tag; a string repeats
      forever, a list is consumed in order per state.
    - ``patterns``: substring -> response, first match in insertion order
      wins; ``default`` (if set) answers unmatched prompts.

    Every call is recorded in :attr:`calls` for assertions.
    """

    def __init__(
        self,
        responses: Sequence[str] | None = None,
        *,
        by_state: Mapping[str, str | Sequence[str]] | None = None,
        patterns: Mapping[str, str] | None = None,
        default: str | None = None,
    ) -> None:
        given = [x is not None for x in (responses, by_state, patterns)]
        if sum(given) != 1:
            raise ValueError("give exactly one of responses, by_state, patterns")
        self._responses: list[str] | None = list(responses) if responses is not None else None
        self._by_state: dict[str, str | list[str]] | None = None
        if by_state is not None:
            self._by_state = {
                k: (v if isinstance(v, str) else list(v)) for k, v in by_state.items()
            }
        self._patterns = dict(patterns) if patterns is not None else None
        self._default = default
        self._lock = threading.Lock()
        self.calls: list[ScriptedCall] = []

    def _next_response(self, prompt: str, tag: str | None) -> str:
        if self._responses is not None:
            if not self._responses:
                raise ScriptExhausted("ordered script consumed")
            return self._responses.pop(0)
        if self._by_state is not None:
            if tag is None or tag not in self._by_state:
                if self._default is not None:
                    return self._default
                raise ScriptExhausted(f"no script for state {tag!r}")
            entry = self._by_state[tag]
            if isinstance(entry, str):
                return entry
            if not entry:
                raise ScriptExhausted(f"script for state {tag!r} consumed")
            return entry.pop(0)
        assert self._patterns is not None
        for needle, response in self._patterns.items():
            if needle in prompt:
                return response
        if self._default is not None:
            return self._default
        raise ScriptExhausted("no pattern matched the prompt")

    def complete(
        self, prompt: str, params: DecodingParams, *, tag: str | None = None
    ) -> CompletionResult:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        with self._lock:
            self.calls.append(ScriptedCall(prompt=prompt, params=params, tag=tag))
            text = self._next_response(prompt, tag)
        return CompletionResult(text=apply_stop_sequences(text, params.stop_sequences))

    def calls_by_tag(self, tag: str) -> list[ScriptedCall]:
        return [c for c in self.calls if c.tag == tag]
