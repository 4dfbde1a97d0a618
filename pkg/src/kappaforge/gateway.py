"""Completion dispatch: live HTTP, scripted mock and replay-cache backends."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx

from .prompts import RenderedPrompt, parse_enum, Strategy, Task

log = logging.getLogger(__name__)

API_KEY_ENV = "KAPPAFORGE_API_KEY"


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    """One failed attempt; retried by :func:`complete`."""


class TransportExhausted(GatewayError):
    def __init__(self, message: str, attempts: int, last_error: Exception | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.last_error = last_error


class CacheMiss(GatewayError):
    """Replay cache has no entry for a request; not retried."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    base_backoff: float = 0.5
    max_backoff: float = 30.0
    jitter: float = 0.25

    def delay(self, failed_attempt: int, rng: random.Random | None = None) -> float:
        base = min(self.max_backoff, self.base_backoff * 2 ** (failed_attempt - 1))
        if not self.jitter:
            return base
        spread = (rng or random).uniform(-self.jitter, self.jitter)
        return max(0.0, base * (1 + spread))


@dataclass(frozen=True)
class ModelConfig:
    model_id: str
    endpoint: str = ""
    temperature: float = 0.0
    max_in_flight: int = 4
    retry: RetryPolicy = RetryPolicy()
    timeout: float = 120.0
    min_interval: float = 0.0
    profile_id: str = "default"

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise GatewayError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_in_flight < 1:
            raise GatewayError("max_in_flight must be >= 1")
        if self.retry.max_attempts < 1:
            raise GatewayError("retry.max_attempts must be >= 1")


@dataclass(frozen=True)
class Completion:
    text: str
    attempt_count: int
    latency: float
    backend_kind: str

    @property
    def fingerprint(self) -> str:
        return text_fingerprint(self.text)


def text_fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def cache_key(model_id: str, prompt_fingerprint: str, temperature: float, instance_index: int) -> str:
    canonical = "\x1f".join([model_id, prompt_fingerprint, f"{temperature:.6f}", str(instance_index)])
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Backend(Protocol):
    kind: str

    def send(self, config: ModelConfig, prompt: RenderedPrompt, instance_index: int) -> str:
        """Return raw response text or raise :class:`TransportError`."""


class LiveBackend:
    """OpenAI-compatible chat-completions endpoint."""

    kind = "live"

    def __init__(self, api_key: str | None = None, client: httpx.Client | None = None):
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.client = client or httpx.Client()

    def payload(self, config: ModelConfig, prompt: RenderedPrompt) -> dict:
        return {
            "model": config.model_id,
            "temperature": config.temperature,
            "messages": [{"role": "user", "content": prompt.text}],
        }

    def send(self, config: ModelConfig, prompt: RenderedPrompt, instance_index: int) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.client.post(
                config.endpoint, json=self.payload(config, prompt), headers=headers, timeout=config.timeout
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed response body: {exc!r}") from exc
        if not isinstance(content, str):
            raise TransportError("response content is not a string")
        return content


@dataclass(frozen=True)
class MockRule:
    response: str
    task: Task | None = None
    strategy: Strategy | None = None
    model_id: str | None = None
    body_contains: tuple[str, ...] = ()
    instance: int | None = None

    def matches(self, config: ModelConfig, prompt: RenderedPrompt, instance_index: int) -> bool:
        if self.task is not None and prompt.task is not self.task:
            return False
        if self.strategy is not None and prompt.strategy is not self.strategy:
            return False
        if self.model_id is not None and config.model_id != self.model_id:
            return False
        if self.instance is not None and instance_index != self.instance:
            return False
        if self.body_contains:
            body = prompt.body.casefold()
            return any(s.casefold() in body for s in self.body_contains)
        return True


class MockBackend:
    """Scripted responses.

    Lookup order: exact prompt fingerprint, then the first matching rule,
    then ``default``. No match and no default raises :class:`GatewayError`.
    """

    kind = "mock"

    def __init__(
        self,
        by_fingerprint: dict[str, str] | None = None,
        rules: Sequence[MockRule] = (),
        default: str | None = None,
    ):
        self.by_fingerprint = dict(by_fingerprint or {})
        self.rules = list(rules)
        self.default = default

    @classmethod
    def from_script(cls, path: "str | Path") -> "MockBackend":
        script = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = []
        for raw in script.get("rules", []):
            contains = raw.get("body_contains", ())
            rules.append(
                MockRule(
                    response=raw["response"],
                    task=parse_enum(Task, raw["task"]) if raw.get("task") else None,
                    strategy=parse_enum(Strategy, raw["strategy"]) if raw.get("strategy") else None,
                    model_id=raw.get("model_id"),
                    body_contains=(contains,) if isinstance(contains, str) else tuple(contains),
                    instance=raw.get("instance"),
                )
            )
        return cls(script.get("by_fingerprint"), rules, script.get("default"))

    def send(self, config: ModelConfig, prompt: RenderedPrompt, instance_index: int) -> str:
        if prompt.fingerprint in self.by_fingerprint:
            return self.by_fingerprint[prompt.fingerprint]
        for rule in self.rules:
            if rule.matches(config, prompt, instance_index):
                return rule.response
        if self.default is not None:
            return self.default
        raise GatewayError(f"mock script has no response for prompt {prompt.fingerprint[:12]}")


class ReplayCache:
    """One UTF-8 file per cache key under ``root``."""

    def __init__(self, root: "str | Path"):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / f"{key}.txt"

    def get(self, key: str) -> str | None:
        p = self.path(key)
        if not p.exists():
            return None
        return p.read_bytes().decode("utf-8")

    def put(self, key: str, text: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.path(key)
        tmp = p.with_suffix(f".tmp{threading.get_ident()}")
        tmp.write_bytes(text.encode("utf-8"))
        tmp.replace(p)


class ReplayBackend:
    kind = "replay"

    def __init__(self, cache: ReplayCache):
        self.cache = cache

    def send(self, config: ModelConfig, prompt: RenderedPrompt, instance_index: int) -> str:
        key = cache_key(config.model_id, prompt.fingerprint, config.temperature, instance_index)
        text = self.cache.get(key)
        if text is None:
            raise CacheMiss(f"no cached response for key {key}")
        return text


class RecordingBackend:
    """Wrap a backend and store every successful response in a replay cache."""

    def __init__(self, inner: Backend, cache: ReplayCache):
        self.inner = inner
        self.cache = cache
        self.kind = inner.kind

    def send(self, config: ModelConfig, prompt: RenderedPrompt, instance_index: int) -> str:
        text = self.inner.send(config, prompt, instance_index)
        self.cache.put(cache_key(config.model_id, prompt.fingerprint, config.temperature, instance_index), text)
        return text


class FlakyBackend:
    """Fault injection for tests: fail a seeded fraction of attempts."""

    def __init__(self, inner: Backend, failure_rate: float, seed: int = 0, max_consecutive: int | None = None):
        self.inner = inner
        self.kind = inner.kind
        self.failure_rate = failure_rate
        self.seed = seed
        self.max_consecutive = max_consecutive
        self._attempts: dict[tuple, int] = {}
        self._lock = threading.Lock()

    def send(self, config: ModelConfig, prompt: RenderedPrompt, instance_index: int) -> str:
        key = (config.model_id, prompt.fingerprint, instance_index)
        with self._lock:
            attempt = self._attempts.get(key, 0)
            self._attempts[key] = attempt + 1
        digest = hashlib.sha256(f"{self.seed}|{key}|{attempt}".encode()).digest()
        draw = int.from_bytes(digest[:8], "big") / 2**64
        capped = self.max_consecutive is not None and attempt >= self.max_consecutive
        if draw < self.failure_rate and not capped:
            raise TransportError(f"injected failure (attempt {attempt + 1})")
        return self.inner.send(config, prompt, instance_index)


@dataclass
class TranscriptLog:
    """Thread-safe record of every dispatch; optionally mirrored to JSONL."""

    path: Path | None = None
    entries: list[dict] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def append(self, entry: dict) -> None:
        with self._lock:
            self.entries.append(entry)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")


class _Pacer:
    """Enforce a minimum delay between request starts."""

    def __init__(self, interval: float, clock=time.monotonic, sleep=time.sleep):
        self.interval = interval
        self.clock = clock
        self.sleep = sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        if self.interval <= 0:
            return
        with self._lock:
            now = self.clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self.sleep(start - now)


def complete(
    backend: Backend,
    config: ModelConfig,
    prompt: RenderedPrompt,
    instance_index: int = 0,
    transcript: TranscriptLog | None = None,
    sleep: Callable[[float], None] = time.sleep,
    _pacer: _Pacer | None = None,
) -> Completion:
    key = cache_key(config.model_id, prompt.fingerprint, config.temperature, instance_index)
    start = time.monotonic()
    last_error: Exception | None = None
    for attempt in range(1, config.retry.max_attempts + 1):
        if _pacer is not None:
            _pacer.wait()
        try:
            text = backend.send(config, prompt, instance_index)
        except CacheMiss as exc:
            _log(transcript, key, config, prompt, instance_index, attempt, error=str(exc))
            raise TransportExhausted(str(exc), attempt, exc) from exc
        except TransportError as exc:
            last_error = exc
            _log(transcript, key, config, prompt, instance_index, attempt, error=str(exc))
            if attempt < config.retry.max_attempts:
                delay = config.retry.delay(attempt)
                log.debug("attempt %d for %s failed (%s); retrying in %.2fs", attempt, key[:12], exc, delay)
                sleep(delay)
            continue
        _log(transcript, key, config, prompt, instance_index, attempt, text=text)
        return Completion(text, attempt, time.monotonic() - start, backend.kind)
    raise TransportExhausted(
        f"{config.retry.max_attempts} attempts failed for {key[:12]}: {last_error}",
        config.retry.max_attempts,
        last_error,
    )


def _log(transcript, key, config, prompt, instance_index, attempt, text=None, error=None):
    if transcript is None:
        return
    entry = {
        "cache_key": key,
        "model_id": config.model_id,
        "prompt_fingerprint": prompt.fingerprint,
        "instance": instance_index,
        "attempt": attempt,
    }
    if error is not None:
        entry["error"] = error
    else:
        entry["response_fingerprint"] = text_fingerprint(text)
    transcript.append(entry)


def complete_batch(
    backend: Backend,
    config: ModelConfig,
    prompts: Sequence[RenderedPrompt],
    instance_index: int = 0,
    transcript: TranscriptLog | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[Completion | GatewayError]:
    """Dispatch ``prompts`` with at most ``config.max_in_flight`` in flight.

    Results line up with ``prompts``; a failed item holds its exception
    instead of a :class:`Completion` and never stops the batch.
    """
    if not prompts:
        raise GatewayError("empty batch")
    pacer = _Pacer(config.min_interval)

    def one(prompt: RenderedPrompt):
        try:
            return complete(backend, config, prompt, instance_index, transcript, sleep, pacer)
        except GatewayError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        return list(pool.map(one, prompts))
