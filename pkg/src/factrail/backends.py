"""Text-generation backends behind a single request/reply contract.

Two implementations: a scripted backend that replays canned continuations
keyed by a SHA-256 fingerprint of the exact prompt (deterministic tests and
offline replay), and an HTTP client speaking the common chat-completion JSON
shape. Both truncate at stop strings, so a reply body never contains an end
token.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

import requests

from .grammar import StepKind, TokenKind

__all__ = [
    "BackendError",
    "BackendUnavailableError",
    "MalformedUpstreamResponseError",
    "EmptyGenerationError",
    "AgentRequest",
    "AgentReply",
    "Backend",
    "BackendConfig",
    "ScriptedBackend",
    "HttpBackend",
    "prompt_text",
    "fingerprint",
    "load_script",
    "save_script",
    "chat_completion",
    "LENGTH_LIMIT_MARKER",
    "END_TOKEN_SURFACES",
    "HEAD_TOKEN_SURFACES",
]

END_TOKEN_SURFACES = tuple(kind.end.value for kind in StepKind)
HEAD_TOKEN_SURFACES = tuple(kind.head.value for kind in StepKind)

LENGTH_LIMIT_MARKER = "length"

_HEAD_TOKENS = {kind.head for kind in StepKind}
_MATCHING_END = {kind.head: kind.end for kind in StepKind}


class BackendError(Exception):
    pass


class BackendUnavailableError(BackendError):
    def __init__(self, message: str, status: int | None = None) -> None:
        self.status = status
        super().__init__(message)


class MalformedUpstreamResponseError(BackendError):
    pass


class EmptyGenerationError(BackendError):
    def __init__(self) -> None:
        super().__init__("backend produced an empty continuation")


@dataclass(frozen=True)
class AgentRequest:
    """One generation call: framed instruction, prior trajectory text, next head."""

    instruction: str
    prior_trajectory: str
    head: TokenKind
    stop: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "stop", tuple(self.stop))
        if self.head not in _HEAD_TOKENS:
            raise ValueError(f"{self.head.value} is not a section head token")
        if _MATCHING_END[self.head].value not in self.stop:
            raise ValueError("stop strings must include the end token matching the head")


@dataclass(frozen=True)
class AgentReply:
    body: str
    terminated_by: str


class Backend(Protocol):
    def generate(self, request: AgentRequest) -> AgentReply: ...


def prompt_text(request: AgentRequest) -> str:
    """The exact prompt sent upstream: instruction, prior sections, open head."""
    return f"{request.instruction}{request.prior_trajectory}{request.head.value}\n"


def fingerprint(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def _finalize(raw: str, stop: tuple[str, ...]) -> tuple[str, str | None]:
    """Truncate at the earliest stop (any end token counts) and trim framing newlines."""
    cut = len(raw)
    fired: str | None = None
    candidates = list(stop) + [t for t in END_TOKEN_SURFACES if t not in stop]
    for candidate in candidates:
        at = raw.find(candidate)
        if at != -1 and at < cut:
            cut = at
            fired = candidate
    body = raw[:cut]
    if body.startswith("\n"):
        body = body[1:]
    if body.endswith("\n"):
        body = body[:-1]
    return body, fired


class ScriptedBackend:
    """Replays canned reply bodies keyed by the fingerprint of the exact prompt."""

    def __init__(self, script: Mapping[str, str] | None = None) -> None:
        self._script: dict[str, str] = dict(script or {})

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls(load_script(path))

    def add_reply(self, prompt: str, body: str) -> None:
        self._script[fingerprint(prompt)] = body

    def generate(self, request: AgentRequest) -> AgentReply:
        prompt = prompt_text(request)
        key = fingerprint(prompt)
        raw = self._script.get(key)
        if raw is None:
            raise BackendUnavailableError(
                f"no scripted reply for prompt fingerprint {key[:12]}"
            )
        body, fired = _finalize(raw, request.stop)
        if not body:
            raise EmptyGenerationError()
        _assert_stop_discipline(body)
        return AgentReply(body, fired or _MATCHING_END[request.head].value)


def _assert_stop_discipline(body: str) -> None:
    for token in END_TOKEN_SURFACES:
        if token in body:
            raise BackendError(f"reply body contains the end token {token}")


def load_script(path: str | Path) -> dict[str, str]:
    """Read a JSONL replay script of {"fingerprint", "reply"} records."""
    script: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                script[record["fingerprint"]] = record["reply"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise BackendError(f"bad script record on line {lineno}: {exc}") from exc
    return script


def save_script(script: Mapping[str, str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for key in sorted(script):
            handle.write(
                json.dumps(
                    {"fingerprint": key, "reply": script[key]},
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for the HTTP chat-completion backend."""

    endpoint_url: str
    model: str = "default"
    api_key_env: str = "FACTRAIL_API_KEY"
    max_output_tokens: int = 512
    timeout_s: float = 30.0
    retries: int = 2
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.retries < 0:
            raise ValueError("retries must be non-negative")
        if self.timeout_s <= 0:
            raise ValueError("timeout must be positive")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be at least 1")


def chat_completion(
    config: BackendConfig,
    prompt: str,
    stop: tuple[str, ...] = (),
    session: requests.Session | None = None,
) -> tuple[str, str | None]:
    """POST one chat-completion request; return (content, finish_reason).

    Transport failures and non-2xx statuses are retried until the attempt
    budget (retries + 1) is spent, then surface as unavailability. A 2xx
    response missing the text field is malformed and not retried.
    """
    payload = {
        "model": config.model,
        "messages": [{"role": "user", "content": prompt}],
        "stop": list(stop),
        "temperature": 0,
        "max_tokens": config.max_output_tokens,
    }
    headers = {}
    api_key = os.environ.get(config.api_key_env)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    post = (session or requests).post
    last_error: BackendUnavailableError | None = None
    for _attempt in range(config.retries + 1):
        try:
            response = post(
                config.endpoint_url, json=payload, headers=headers, timeout=config.timeout_s
            )
        except requests.RequestException as exc:
            last_error = BackendUnavailableError(f"transport failure: {exc}")
            continue
        if response.status_code < 200 or response.status_code >= 300:
            last_error = BackendUnavailableError(
                f"upstream returned status {response.status_code}",
                status=response.status_code,
            )
            continue
        try:
            document = response.json()
        except ValueError as exc:
            raise MalformedUpstreamResponseError(f"response is not JSON: {exc}") from exc
        try:
            choice = document["choices"][0]
            content = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedUpstreamResponseError(
                "response lacks choices[0].message.content"
            ) from exc
        if not isinstance(content, str):
            raise MalformedUpstreamResponseError("message content is not text")
        finish_reason = choice.get("finish_reason") if isinstance(choice, dict) else None
        return content, finish_reason
    assert last_error is not None
    raise last_error


class HttpBackend:
    """Chat-completion client with retries and a bound on in-flight requests."""

    def __init__(self, config: BackendConfig) -> None:
        self._config = config
        self._semaphore = threading.BoundedSemaphore(config.max_in_flight)
        self._session = requests.Session()

    def generate(self, request: AgentRequest) -> AgentReply:
        prompt = prompt_text(request)
        with self._semaphore:
            content, finish_reason = chat_completion(
                self._config, prompt, request.stop, session=self._session
            )
        body, fired = _finalize(content, request.stop)
        if not body:
            raise EmptyGenerationError()
        _assert_stop_discipline(body)
        if fired is not None:
            terminated_by = fired
        elif finish_reason == "length":
            terminated_by = LENGTH_LIMIT_MARKER
        else:
            # Upstream consumed the stop string itself.
            terminated_by = _MATCHING_END[request.head].value
        return AgentReply(body, terminated_by)
