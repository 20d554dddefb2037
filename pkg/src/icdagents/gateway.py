"""Completion gateway: requests, providers, caching, replay and token budgets."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from .corpus import segment_sentences
from .errors import (
    AuthenticationError,
    BudgetError,
    CacheLockedError,
    ContentFilterError,
    GatewayError,
    GatewayTimeout,
    RateLimitError,
    UnscriptedRequestError,
)

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.1
DEFAULT_TOKEN_BUDGET = 8000
DEFAULT_MAX_RESPONSE_TOKENS = 1024


@dataclass(frozen=True)
class CompletionRequest:
    system_prompt: str
    user_messages: tuple[str, ...]
    temperature: float = DEFAULT_TEMPERATURE
    max_response_tokens: int = DEFAULT_MAX_RESPONSE_TOKENS
    model_id: str = "gpt-4"
    token_budget: int = DEFAULT_TOKEN_BUDGET
    # routing/audit metadata (role, note_id); never part of the cache key
    tags: Mapping[str, str] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "user_messages", tuple(self.user_messages))
        object.__setattr__(self, "tags", dict(self.tags))
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.token_budget < 1:
            raise ValueError("token_budget must be at least 1")
        if self.max_response_tokens < 1:
            raise ValueError("max_response_tokens must be at least 1")
        if not self.user_messages:
            raise ValueError("a request needs at least one user message")

    def snapshot(self) -> dict:
        """The hashed fields, in fixed order."""
        return {
            "system_prompt": self.system_prompt,
            "user_messages": list(self.user_messages),
            "temperature": self.temperature,
            "max_response_tokens": self.max_response_tokens,
            "model_id": self.model_id,
        }

    @property
    def digest(self) -> str:
        return cache_key(self)

    def messages(self) -> list[dict]:
        msgs = [{"role": "system", "content": self.system_prompt}]
        msgs += [{"role": "user", "content": m} for m in self.user_messages]
        return msgs


def cache_key(req: CompletionRequest) -> str:
    canonical = json.dumps(req.snapshot(), ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    prompt_tokens: int = 0
    response_tokens: int = 0
    provider: str = "remote"
    latency: float = 0.0
    digest: str = ""


class Provider(Protocol):
    def complete(self, req: CompletionRequest) -> CompletionResponse: ...


# -- token counting --------------------------------------------------------


class TokenCounter(Protocol):
    name: str

    def count(self, text: str) -> int: ...


class ApproxTokenCounter:
    """ceil(characters / 4); a tokenizer-free stand-in."""

    name = "approx-chars/4"
    approximate = True

    def __init__(self, chars_per_token: int = 4):
        self.chars_per_token = chars_per_token

    def count(self, text: str) -> int:
        return math.ceil(len(text) / self.chars_per_token)


def count_tokens(text: str, counter: TokenCounter | None = None) -> int:
    return (counter or ApproxTokenCounter()).count(text)


@dataclass(frozen=True)
class Truncation:
    text: str
    truncated: bool
    tokens: int


def _longest_fitting_prefix(text: str, allowed: int, counter: TokenCounter) -> int:
    lo, hi = 0, len(text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if counter.count(text[:mid]) <= allowed:
            lo = mid
        else:
            hi = mid - 1
    return lo


def truncate_to_budget(
    note_text: str,
    fixed_prompt_parts: Sequence[str] | str,
    budget: int = DEFAULT_TOKEN_BUDGET,
    max_response_tokens: int = DEFAULT_MAX_RESPONSE_TOKENS,
    counter: TokenCounter | None = None,
) -> Truncation:
    """Cut the note so note + fixed parts + response reserve fit in ``budget``.

    Only the note is shortened. The cut goes at the last sentence end inside
    the limit, unless that would discard more than half of what fits, in
    which case the last whitespace is used, then a hard character cut.
    """
    counter = counter or ApproxTokenCounter()
    if isinstance(fixed_prompt_parts, str):
        fixed_prompt_parts = [fixed_prompt_parts]
    overhead = sum(counter.count(p) for p in fixed_prompt_parts)
    allowed = budget - overhead - max_response_tokens
    if allowed <= 0:
        raise BudgetError(
            f"prompt overhead {overhead} + response reserve {max_response_tokens} "
            f"leaves no room in a budget of {budget}"
        )
    full = counter.count(note_text)
    if full <= allowed:
        return Truncation(note_text, False, full)

    limit = _longest_fitting_prefix(note_text, allowed, counter)
    cut = 0
    for sent in segment_sentences(note_text):
        if sent.end > limit:
            break
        cut = sent.end
    if cut * 2 < limit:
        ws = max(note_text.rfind(" ", 0, limit + 1), note_text.rfind("\n", 0, limit + 1))
        cut = ws if ws * 2 >= limit else limit
    text = note_text[:cut].rstrip()
    return Truncation(text, True, counter.count(text))


# -- providers -------------------------------------------------------------


class ReplayProvider:
    """Serves scripted responses keyed by request digest."""

    def __init__(self, entries: Mapping[str, str] | None = None):
        self.entries = dict(entries or {})

    def add(self, req_or_digest: CompletionRequest | str, text: str) -> str:
        digest = req_or_digest if isinstance(req_or_digest, str) else req_or_digest.digest
        self.entries[digest] = text
        return digest

    @classmethod
    def from_files(cls, paths: Iterable[str | Path]) -> "ReplayProvider":
        """Load ``{digest, text}`` lines; cache files have exactly that shape."""
        entries = {}
        for path in paths:
            for rec in _read_jsonl(Path(path)):
                entries[rec["digest"]] = rec.get("text", rec.get("response", ""))
        return cls(entries)

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        digest = req.digest
        try:
            text = self.entries[digest]
        except KeyError:
            raise UnscriptedRequestError(digest) from None
        return CompletionResponse(text, provider="replay", digest=digest)


class ScriptProvider:
    """Answers requests with a deterministic function of the request.

    ``responder`` receives the request and returns the completion text (or
    raises a GatewayError). Useful for driving workflows by agent role
    without precomputing digests.
    """

    def __init__(self, responder: Callable[[CompletionRequest], str]):
        self.responder = responder

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        return CompletionResponse(self.responder(req), provider="replay", digest=req.digest)

    @classmethod
    def from_rules(cls, rules: Sequence[Mapping]) -> "ScriptProvider":
        """Rules are dicts with ``text`` plus optional ``role``, ``note_id``
        and ``contains`` matchers; the first matching rule answers."""
        rules = list(rules)

        def respond(req: CompletionRequest) -> str:
            prompt = req.system_prompt + "\n" + "\n".join(req.user_messages)
            for rule in rules:
                if "role" in rule and rule["role"] != req.tags.get("role"):
                    continue
                if "note_id" in rule and str(rule["note_id"]) != req.tags.get("note_id"):
                    continue
                if "contains" in rule and rule["contains"] not in prompt:
                    continue
                return rule["text"]
            raise UnscriptedRequestError(req.digest)

        return cls(respond)


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                # torn final line from an interrupted append
                log.warning("skipping unreadable line in %s", path)
    return out


class CachingProvider:
    """Persistent digest -> response cache in front of another provider.

    The store is an append-only JSON-lines file loaded on construction. A
    ``.lock`` file next to it marks the cache as owned by this process.
    """

    def __init__(self, inner: Provider | None, path: str | Path, *, lock: bool = True):
        self.inner = inner
        self.path = Path(path)
        self._lock = threading.Lock()
        self._lockfile: Path | None = None
        if lock:
            self._acquire()
        self.entries: dict[str, dict] = {}
        for rec in _read_jsonl(self.path):
            self.entries[rec["digest"]] = rec
        self.hits = 0
        self.misses = 0

    def _acquire(self) -> None:
        lockfile = self.path.with_name(self.path.name + ".lock")
        lockfile.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(lockfile, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CacheLockedError(
                f"cache {self.path} is in use (lock file {lockfile} exists)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self._lockfile = lockfile

    def close(self) -> None:
        if self._lockfile is not None:
            self._lockfile.unlink(missing_ok=True)
            self._lockfile = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        self.close()

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        digest = req.digest
        with self._lock:
            rec = self.entries.get(digest)
            if rec is not None:
                self.hits += 1
                return CompletionResponse(
                    rec["text"],
                    prompt_tokens=rec.get("prompt_tokens", 0),
                    response_tokens=rec.get("response_tokens", 0),
                    provider="cache",
                    digest=digest,
                )
            self.misses += 1
        if self.inner is None:
            raise UnscriptedRequestError(digest)
        resp = self.inner.complete(req)
        rec = {
            "digest": digest,
            "request": req.snapshot(),
            "text": resp.text,
            "prompt_tokens": resp.prompt_tokens,
            "response_tokens": resp.response_tokens,
        }
        with self._lock:
            if digest not in self.entries:
                self.entries[digest] = rec
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        return resp


class RateLimiter:
    """Sliding one-minute window; blocks until a request slot is free."""

    def __init__(
        self,
        requests_per_minute: float | None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.rpm = requests_per_minute
        self.clock = clock
        self.sleep = sleep
        self._sent: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.rpm:
            return
        with self._lock:
            while True:
                now = self.clock()
                while self._sent and now - self._sent[0] >= 60.0:
                    self._sent.popleft()
                if len(self._sent) < self.rpm:
                    self._sent.append(now)
                    return
                self.sleep(60.0 - (now - self._sent[0]))


class RemoteProvider:
    """HTTP chat-completion client with retries and a request-rate ceiling.

    Speaks the common ``/chat/completions`` JSON shape: ``model``,
    ``messages``, ``temperature``, ``max_tokens``; bearer-token auth.
    """

    TRANSIENT_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})

    def __init__(
        self,
        endpoint: str,
        api_key: str,
        *,
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        backoff_cap: float = 60.0,
        requests_per_minute: float | None = None,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        self.endpoint = endpoint
        self.api_key = api_key
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.client = client or httpx.Client(timeout=timeout)
        self.timeout = timeout
        self.clock = clock
        self.sleep = sleep
        self.limiter = RateLimiter(requests_per_minute, clock=clock, sleep=sleep)
        self.rng = rng or random.Random()

    @classmethod
    def from_env(
        cls,
        endpoint_env: str = "ICDAGENTS_ENDPOINT",
        key_env: str = "ICDAGENTS_API_KEY",
        endpoint: str | None = None,
        **kwargs,
    ) -> "RemoteProvider":
        endpoint = endpoint or os.environ.get(endpoint_env)
        key = os.environ.get(key_env)
        if not endpoint:
            raise AuthenticationError(f"no endpoint configured (set {endpoint_env})")
        if not key:
            raise AuthenticationError(f"no API key in environment variable {key_env}")
        return cls(endpoint, key, **kwargs)

    def _backoff(self, attempt: int) -> float:
        delay = min(self.backoff_cap, self.backoff_base * 2**attempt)
        return delay * (0.5 + self.rng.random() / 2)

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        payload = {
            "model": req.model_id,
            "messages": req.messages(),
            "temperature": req.temperature,
            "max_tokens": req.max_response_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last: GatewayError | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                self.sleep(self._backoff(attempt - 1))
            self.limiter.acquire()
            started = self.clock()
            try:
                resp = self.client.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
            except httpx.TimeoutException as exc:
                last = GatewayTimeout(f"request timed out: {exc}")
                continue
            except httpx.TransportError as exc:
                last = GatewayError(f"transport error: {exc}")
                continue
            latency = self.clock() - started

            if resp.status_code in (401, 403):
                raise AuthenticationError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            if _is_content_filter(resp):
                raise ContentFilterError(f"content filter: {resp.text[:200]}")
            if resp.status_code in self.TRANSIENT_STATUS:
                if resp.status_code == 429:
                    last = RateLimitError(f"rate limited after {attempt + 1} attempt(s)")
                    retry_after = resp.headers.get("retry-after")
                    if retry_after and retry_after.replace(".", "", 1).isdigit():
                        self.sleep(float(retry_after))
                else:
                    last = GatewayError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")

            body = resp.json()
            try:
                text = body["choices"][0]["message"].get("content") or ""
            except (KeyError, IndexError, TypeError) as exc:
                raise GatewayError(f"unexpected response shape: {str(body)[:200]}") from exc
            usage = body.get("usage") or {}
            return CompletionResponse(
                text,
                prompt_tokens=usage.get("prompt_tokens", 0),
                response_tokens=usage.get("completion_tokens", 0),
                provider="remote",
                latency=latency,
                digest=req.digest,
            )
        assert last is not None
        raise last


def _is_content_filter(resp: httpx.Response) -> bool:
    if resp.status_code not in (200, 400):
        return False
    try:
        body = resp.json()
    except ValueError:
        return False
    if not isinstance(body, dict):
        return False
    err = body.get("error")
    if isinstance(err, dict) and err.get("code") == "content_filter":
        return True
    choices = body.get("choices") or []
    return bool(choices) and isinstance(choices[0], dict) and choices[0].get("finish_reason") == "content_filter"


# -- gateway ---------------------------------------------------------------


class TranscriptLog:
    """Append-only JSON-lines log of every request/response pair."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def record(self, req: CompletionRequest, resp: CompletionResponse | None,
               started: datetime, error: str | None = None) -> None:
        rec = {
            "digest": req.digest,
            "role": req.tags.get("role"),
            "note_id": req.tags.get("note_id"),
            "started": started.isoformat(),
            "finished": datetime.now(timezone.utc).isoformat(),
            "request": req.snapshot(),
            "response": resp.text if resp else None,
            "provider": resp.provider if resp else None,
            "prompt_tokens": resp.prompt_tokens if resp else None,
            "response_tokens": resp.response_tokens if resp else None,
            "error": error,
        }
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


class Gateway:
    """The single entry point agents use to obtain completions."""

    def __init__(
        self,
        provider: Provider,
        counter: TokenCounter | None = None,
        transcript: TranscriptLog | None = None,
    ):
        self.provider = provider
        self.counter = counter or ApproxTokenCounter()
        self.transcript = transcript
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        with self._lock:
            self.calls += 1
        started = datetime.now(timezone.utc)
        try:
            resp = complete(req, self.provider)
        except GatewayError as exc:
            if self.transcript:
                self.transcript.record(req, None, started, error=str(exc))
            raise
        if self.transcript:
            self.transcript.record(req, resp, started)
        return resp

    def count(self, text: str) -> int:
        return self.counter.count(text)


def complete(req: CompletionRequest, provider: Provider) -> CompletionResponse:
    t0 = time.monotonic()
    resp = provider.complete(req)
    if not resp.latency:
        resp = CompletionResponse(
            resp.text, resp.prompt_tokens, resp.response_tokens, resp.provider,
            time.monotonic() - t0, resp.digest or req.digest,
        )
    return resp
