"""Chat backends: an HTTP client for chat-completions endpoints and a scripted stand-in."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import requests

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")

ENV_BASE_URL = "CAMA_LLM_BASE_URL"
ENV_API_KEY = "CAMA_LLM_API_KEY"
ENV_MODEL = "CAMA_LLM_MODEL"


class LLMError(RuntimeError):
    """Base class for backend failures."""


class AuthError(LLMError):
    pass


class BackendTimeout(LLMError):
    pass


class BackendUnavailable(LLMError):
    pass


class ScriptMismatch(LLMError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    model: str = "default"
    temperature: float = 0.0
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        msgs = tuple(m if isinstance(m, Message) else Message(**m) for m in self.messages)
        if not msgs:
            raise ValueError("chat request needs at least one message")
        if msgs[0].role not in ("system", "user"):
            raise ValueError(f"first message must be system or user, got {msgs[0].role!r}")
        for m in msgs:
            if m.role not in ROLES:
                raise ValueError(f"unknown role {m.role!r}")
        object.__setattr__(self, "messages", msgs)

    @classmethod
    def simple(cls, system: str | None, user: str, **kw: Any) -> "ChatRequest":
        msgs = ([Message("system", system)] if system else []) + [Message("user", user)]
        return cls(tuple(msgs), **kw)

    @property
    def text(self) -> str:
        return "\n".join(m.content for m in self.messages)

    def digest(self) -> str:
        payload = json.dumps([m.to_dict() for m in self.messages], ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class ChatResponse:
    content: str
    usage: Usage
    latency: float
    backend: str
    model: str = "default"
    temperature: float = 0.0
    batch: str | None = None  # responses sharing a batch id ran in parallel

    def in_batch(self, batch: str) -> "ChatResponse":
        return ChatResponse(self.content, self.usage, self.latency, self.backend, self.model,
                            self.temperature, batch)

    def to_dict(self) -> dict[str, Any]:
        return {"content": self.content, "prompt_tokens": self.usage.prompt_tokens,
                "completion_tokens": self.usage.completion_tokens, "latency": self.latency,
                "backend": self.backend, "model": self.model, "temperature": self.temperature,
                "batch": self.batch}


class Backend(Protocol):
    id: str

    def chat(self, request: ChatRequest) -> ChatResponse: ...


def chat(backend: Backend, request: ChatRequest) -> ChatResponse:
    return backend.chat(request)


@dataclass(frozen=True)
class UsageTotal:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    wall_seconds: float = 0.0
    calls: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def to_dict(self) -> dict[str, Any]:
        return {"calls": self.calls, "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens, "total_tokens": self.total_tokens,
                "wall_seconds": self.wall_seconds}


def usage_total(responses: Iterable[ChatResponse]) -> UsageTotal:
    """Sum tokens; wall time sums sequential calls and takes the max within each parallel batch."""
    prompt = completion = calls = 0
    wall = 0.0
    batches: dict[str, float] = {}
    for r in responses:
        prompt += r.usage.prompt_tokens
        completion += r.usage.completion_tokens
        calls += 1
        if r.batch is None:
            wall += r.latency
        else:
            batches[r.batch] = max(batches.get(r.batch, 0.0), r.latency)
    return UsageTotal(prompt, completion, wall + sum(batches.values()), calls)


# -------------------------------------------------------------------- scripted


@dataclass
class ScriptRule:
    """Canned reply for requests whose joined message text matches ``pattern``.

    With several ``responses`` the rule replies with them in turn and then
    repeats the last one. ``error`` makes the rule raise instead of replying.
    """

    pattern: str
    responses: Sequence[str] = ("",)
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency: float = 0.0
    error: str | None = None
    _regex: re.Pattern = field(init=False, repr=False)
    _hits: int = field(default=0, init=False, repr=False)

    def __post_init__(self) -> None:
        self._regex = re.compile(self.pattern)
        if isinstance(self.responses, str):
            self.responses = (self.responses,)
        if self.error not in (None, "unavailable", "timeout", "auth"):
            raise ValueError(f"unknown scripted error kind {self.error!r}")

    def matches(self, text: str) -> bool:
        return self._regex.search(text) is not None

    def next_response(self) -> str:
        i = min(self._hits, len(self.responses) - 1)
        self._hits += 1
        return self.responses[i]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScriptRule":
        responses = d.get("responses", d.get("response", ""))
        usage = d.get("usage", {})
        return cls(
            pattern=d["match"],
            responses=(responses,) if isinstance(responses, str) else tuple(responses),
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            latency=float(d.get("latency", 0.0)),
            error=d.get("error"),
        )


_ERRORS = {"unavailable": BackendUnavailable, "timeout": BackendTimeout, "auth": AuthError}


class ScriptedBackend:
    """Deterministic offline backend.

    In strict mode a request must match exactly one rule; otherwise the first
    matching rule wins and unmatched requests get ``default`` (or raise when no
    default is set). Every call is recorded in ``calls`` in the order served.
    """

    def __init__(self, rules: Sequence[ScriptRule], strict: bool = False, default: str | None = None,
                 default_usage: Usage = Usage(), id: str = "scripted"):
        self.rules = list(rules)
        self.strict = strict
        self.default = default
        self.default_usage = default_usage
        self.id = id
        self.calls: list[tuple[ChatRequest, ChatResponse | None]] = []
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def chat(self, request: ChatRequest) -> ChatResponse:
        text = request.text
        with self._lock:
            hits = [r for r in self.rules if r.matches(text)]
            if self.strict and len(hits) != 1:
                self.calls.append((request, None))
                raise ScriptMismatch(
                    f"strict script: request {request.digest()} matched {len(hits)} rules (need exactly 1)"
                )
            if not hits:
                if self.default is None:
                    self.calls.append((request, None))
                    raise ScriptMismatch(f"no scripted rule matches request {request.digest()}")
                content, usage, latency = self.default, self.default_usage, 0.0
            else:
                rule = hits[0]
                if rule.error is not None:
                    rule._hits += 1
                    self.calls.append((request, None))
                    raise _ERRORS[rule.error](f"scripted {rule.error} for pattern {rule.pattern!r}")
                content = rule.next_response()
                usage = Usage(rule.prompt_tokens, rule.completion_tokens)
                latency = rule.latency
            resp = ChatResponse(content, usage, latency, self.id, request.model, request.temperature)
            self.calls.append((request, resp))
            return resp

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScriptedBackend":
        du = d.get("default_usage", {})
        return cls(
            [ScriptRule.from_dict(r) for r in d.get("rules", [])],
            strict=bool(d.get("strict", False)),
            default=d.get("default"),
            default_usage=Usage(int(du.get("prompt_tokens", 0)), int(du.get("completion_tokens", 0))),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ------------------------------------------------------------------------ http


class HTTPBackend:
    """Client for a ``POST {base_url}/chat/completions`` endpoint."""

    RETRY_WAITS = (1.0, 2.0, 4.0)

    def __init__(self, base_url: str, api_key: str | None = None, model: str = "default",
                 timeout: float = 120.0, sleep: Callable[[float], None] = time.sleep,
                 session: requests.Session | None = None, id: str = "http"):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.sleep = sleep
        self.session = session or requests.Session()
        self.id = id

    @classmethod
    def from_env(cls, **kw: Any) -> "HTTPBackend":
        url = os.environ.get(ENV_BASE_URL)
        if not url:
            raise LLMError(f"{ENV_BASE_URL} is not set")
        return cls(url, os.environ.get(ENV_API_KEY), os.environ.get(ENV_MODEL, "default"), **kw)

    def _payload(self, request: ChatRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": request.model if request.model != "default" else self.model,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
        }
        if request.max_tokens is not None:
            body["max_tokens"] = request.max_tokens
        return body

    def chat(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self._payload(request)
        url = f"{self.base_url}/chat/completions"
        last: Exception | None = None
        for attempt in range(len(self.RETRY_WAITS) + 1):
            if attempt:
                wait = self.RETRY_WAITS[attempt - 1]
                logger.warning("retrying chat request in %.0fs (%s)", wait, last)
                self.sleep(wait)
            start = time.perf_counter()
            try:
                r = self.session.post(url, json=body, headers=headers, timeout=self.timeout)
            except requests.Timeout as exc:
                last = BackendTimeout(f"timeout calling {url}: {exc}")
                continue
            except requests.RequestException as exc:
                last = BackendUnavailable(f"transport error calling {url}: {exc}")
                continue
            latency = time.perf_counter() - start
            if r.status_code in (401, 403):
                raise AuthError(f"{url} rejected credentials (HTTP {r.status_code})")
            if r.status_code == 429 or r.status_code >= 500:
                last = BackendUnavailable(f"{url} returned HTTP {r.status_code}")
                continue
            if r.status_code >= 400:
                raise LLMError(f"{url} returned HTTP {r.status_code}: {r.text[:200]}")
            return self._parse(r.json(), latency, request, body["model"])
        assert last is not None
        raise last

    def _parse(self, data: Mapping[str, Any], latency: float, request: ChatRequest, model: str) -> ChatResponse:
        try:
            content = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise LLMError(f"malformed chat-completions response: {str(data)[:200]}") from None
        u = data.get("usage") or {}
        usage = Usage(int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))
        return ChatResponse(content, usage, latency, self.id, data.get("model", model), request.temperature)


class RecordingLLM:
    """Builds requests with fixed generation settings and keeps every response for accounting."""

    def __init__(self, backend: Backend, model: str = "default", temperature: float = 0.0,
                 max_tokens: int | None = None):
        self.backend = backend
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.responses: list[ChatResponse] = []
        self._lock = threading.Lock()

    @property
    def backend_id(self) -> str:
        return getattr(self.backend, "id", type(self.backend).__name__)

    def ask(self, messages: Sequence[Message] | str, system: str | None = None,
            batch: str | None = None) -> ChatResponse:
        if isinstance(messages, str):
            messages = ([Message("system", system)] if system else []) + [Message("user", messages)]
        req = ChatRequest(tuple(messages), self.model, self.temperature, self.max_tokens)
        resp = self.backend.chat(req)
        if batch is not None:
            resp = resp.in_batch(batch)
        with self._lock:
            self.responses.append(resp)
        return resp

    def total(self) -> UsageTotal:
        with self._lock:
            return usage_total(list(self.responses))
