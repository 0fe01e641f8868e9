"""Chat-completion calls to external model endpoints.

Every call is a fresh single-turn exchange: no conversation history is ever
carried between requests. Transient failures (network errors, timeouts, 5xx,
429) are retried with exponential backoff; other 4xx responses fail at once.

The mock backend answers from a line-delimited script so whole pipeline runs
can be replayed offline, byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import httpx

from .promptkit import RenderedPrompt

logger = logging.getLogger(__name__)


class GatewayError(RuntimeError):
    pass


class UnknownBackendError(GatewayError, KeyError):
    pass


class TransientError(GatewayError):
    """Worth retrying: network trouble, timeouts, 5xx, rate limiting."""


class PermanentError(GatewayError):
    """Not worth retrying: bad request, auth failure, unmatched mock."""


@dataclass(frozen=True)
class BackendConfig:
    name: str
    base_url: str = ""
    model: str = ""
    temperature: float = 0.0
    max_tokens: int = 512
    timeout: float = 60.0
    max_retries: int = 3
    path: str = "/chat/completions"
    api_key_env: str | None = None
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    split_system: bool = False
    mock_script: str | None = None
    backoff_base: float = 0.5
    backoff_max: float = 8.0

    def __post_init__(self):
        if not self.name:
            raise ValueError("backend name must be non-empty")
        if self.temperature < 0:
            raise ValueError(f"{self.name}: temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError(f"{self.name}: max_tokens must be positive")
        if self.max_retries < 0:
            raise ValueError(f"{self.name}: max_retries must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "BackendConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"backend {data.get('name')!r}: unknown keys {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class CompletionRequest:
    prompt: RenderedPrompt
    backend: str
    seed: int | None = None
    request_id: str = field(default_factory=lambda: uuid.uuid4().hex)


@dataclass(frozen=True)
class CompletionResult:
    request_id: str
    backend: str
    raw_text: str | None
    latency: float
    attempt_count: int
    status: str  # "ok" | "failed"
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def derive_seed(run_seed: int, *parts: object) -> int:
    """Deterministic 31-bit seed from the run seed and a path of identifiers."""
    key = "\x1f".join([str(run_seed), *map(str, parts)])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:4], "big") & 0x7FFFFFFF


def build_messages(prompt: RenderedPrompt, split_system: bool = False) -> list[dict]:
    text = prompt.text
    if split_system and text.startswith("You are"):
        first, _, rest = text.partition("\n")
        return [{"role": "system", "content": first}, {"role": "user", "content": rest.lstrip("\n")}]
    return [{"role": "user", "content": text}]


class HttpBackend:
    """POSTs an OpenAI-style chat-completions payload and returns the first choice."""

    def __init__(self, config: BackendConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        headers = {}
        if config.api_key_env:
            key = os.environ.get(config.api_key_env)
            if key:
                headers[config.auth_header] = f"{config.auth_scheme} {key}".strip()
        self.client = httpx.Client(
            base_url=config.base_url, headers=headers, timeout=config.timeout, transport=transport
        )

    def send(self, request: CompletionRequest) -> str:
        cfg = self.config
        payload = {
            "model": cfg.model,
            "messages": build_messages(request.prompt, cfg.split_system),
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        try:
            resp = self.client.post(cfg.path, json=payload)
        except httpx.TimeoutException as exc:
            raise TransientError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientError(f"network error: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise PermanentError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise PermanentError(f"malformed completion payload: {exc}") from exc

    def health(self) -> tuple[bool, str]:
        try:
            resp = self.client.get("/models", timeout=min(self.config.timeout, 10.0))
        except httpx.HTTPError as exc:
            return False, str(exc)
        if resp.status_code >= 500:
            return False, f"HTTP {resp.status_code}"
        return True, "ok"

    def close(self):
        self.client.close()


@dataclass
class MockRule:
    template_id: str
    kind: str  # "hash" | "contains" | "any"
    key: str
    responses: tuple[str, ...]
    fail_count: int = 0
    fail_status: int = 503
    seed: int | None = None

    @classmethod
    def from_record(cls, rec: dict) -> "MockRule":
        template_id, _, rest = rec["match"].partition(":")
        if rest == "*" or rest == "":
            kind, key = "any", ""
        elif rest.startswith("contains:"):
            kind, key = "contains", rest[len("contains:"):]
        else:
            kind, key = "hash", rest
        response = rec.get("response", "")
        responses = (response,) if isinstance(response, str) else tuple(response)
        if not responses:
            raise ValueError(f"mock rule {rec['match']!r} has no response")
        return cls(template_id, kind, key, responses, int(rec.get("fail_count", 0)),
                   int(rec.get("fail_status", 503)), rec.get("seed"))

    def matches(self, prompt: RenderedPrompt, seed: int | None) -> bool:
        if self.template_id not in ("*", prompt.template_id):
            return False
        if self.seed is not None and self.seed != seed:
            return False
        if self.kind == "hash":
            return prompt.sha256 == self.key
        if self.kind == "contains":
            return self.key in prompt.text
        return True


class MockBackend:
    """Scripted backend keyed by (template id, prompt hash).

    Rule priority: exact hash, then ``contains`` rules in file order, then
    wildcards. A rule's first ``fail_count`` calls per (prompt, seed) fail
    with ``fail_status``; later calls walk through its responses, repeating
    the last one. ``{seed}`` in a response is replaced by the request seed.
    """

    def __init__(self, rules: Iterable[MockRule] = (), name: str = "mock", delay: float = 0.0):
        self.name = name
        self.rules = list(rules)
        self.delay = delay
        self.calls: list[dict] = []
        self._counters: dict[tuple, int] = {}
        self._lock = threading.Lock()
        self._in_flight = 0
        self.high_water = 0

    @classmethod
    def from_file(cls, path: str | Path, name: str = "mock") -> "MockBackend":
        rules = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rules.append(MockRule.from_record(json.loads(line)))
        return cls(rules, name=name)

    def add(self, match: str, response: str | Sequence[str], fail_count: int = 0, **kw) -> "MockBackend":
        self.rules.append(MockRule.from_record({"match": match, "response": response,
                                                "fail_count": fail_count, **kw}))
        return self

    def _find(self, prompt: RenderedPrompt, seed: int | None) -> tuple[int, MockRule] | None:
        for kind in ("hash", "contains", "any"):
            for i, rule in enumerate(self.rules):
                if rule.kind == kind and rule.matches(prompt, seed):
                    return i, rule
        return None

    def send(self, request: CompletionRequest) -> str:
        with self._lock:
            self._in_flight += 1
            self.high_water = max(self.high_water, self._in_flight)
            order = len(self.calls)
            entry = {
                "order": order,
                "request_id": request.request_id,
                "template_id": request.prompt.template_id,
                "prompt_sha256": request.prompt.sha256,
                "seed": request.seed,
                "start": time.monotonic(),
            }
            self.calls.append(entry)
            found = self._find(request.prompt, request.seed)
            if found is not None:
                idx, rule = found
                ckey = (idx, request.prompt.sha256, request.seed)
                count = self._counters.get(ckey, 0)
                self._counters[ckey] = count + 1
        try:
            if self.delay:
                time.sleep(self.delay)
            if found is None:
                entry["outcome"] = "unmatched"
                raise PermanentError(f"{self.name}: no mock rule for {request.prompt.template_id} prompt")
            if count < rule.fail_count:
                entry["outcome"] = f"fail:{rule.fail_status}"
                if rule.fail_status >= 500 or rule.fail_status == 429:
                    raise TransientError(f"{self.name}: scripted HTTP {rule.fail_status}")
                raise PermanentError(f"{self.name}: scripted HTTP {rule.fail_status}")
            text = rule.responses[min(count - rule.fail_count, len(rule.responses) - 1)]
            entry["outcome"] = "ok"
            return text.replace("{seed}", str(request.seed))
        finally:
            with self._lock:
                self._in_flight -= 1
                entry["end"] = time.monotonic()

    def health(self) -> tuple[bool, str]:
        return (bool(self.rules), "ok" if self.rules else "mock script has no rules")

    def close(self):
        pass


class Gateway:
    """Routes requests to named backends with retry/backoff and in-flight limits."""

    def __init__(
        self,
        configs: Iterable[BackendConfig],
        backends: dict | None = None,
        offline: bool = False,
        max_in_flight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.configs: dict[str, BackendConfig] = {}
        for cfg in configs:
            if cfg.name in self.configs:
                raise ValueError(f"duplicate backend name {cfg.name!r}")
            self.configs[cfg.name] = cfg
        self.backends = dict(backends or {})
        for name, cfg in self.configs.items():
            if name in self.backends:
                continue
            if offline or (cfg.mock_script and not cfg.base_url):
                if not cfg.mock_script:
                    raise GatewayError(f"backend {name!r} has no mock_script for offline mode")
                self.backends[name] = MockBackend.from_file(cfg.mock_script, name=name)
            else:
                self.backends[name] = HttpBackend(cfg)
        self.max_in_flight = max_in_flight
        self._sleep = sleep
        self._limits = {name: threading.BoundedSemaphore(max_in_flight) for name in self.configs}

    def backoff(self, cfg: BackendConfig, attempt: int) -> float:
        return min(cfg.backoff_max, cfg.backoff_base * (2 ** (attempt - 1)))

    def _resolve(self, name: str) -> tuple[BackendConfig, object]:
        if name not in self.configs or name not in self.backends:
            raise UnknownBackendError(f"unknown backend {name!r}")
        return self.configs[name], self.backends[name]

    def complete(self, request: CompletionRequest, _limit: threading.Semaphore | None = None) -> CompletionResult:
        cfg, backend = self._resolve(request.backend)
        limit = _limit or self._limits[request.backend]
        started = time.monotonic()
        attempt = 0
        error = None
        while attempt < 1 + cfg.max_retries:
            attempt += 1
            with limit:
                try:
                    text = backend.send(request)
                except TransientError as exc:
                    error = str(exc)
                    logger.debug("%s attempt %d failed: %s", request.request_id, attempt, exc)
                except PermanentError as exc:
                    error = str(exc)
                    break
                else:
                    return CompletionResult(request.request_id, request.backend, text,
                                            time.monotonic() - started, attempt, "ok")
            if attempt < 1 + cfg.max_retries:
                self._sleep(self.backoff(cfg, attempt))
        logger.warning("request %s on %s failed after %d attempt(s): %s",
                       request.request_id, request.backend, attempt, error)
        return CompletionResult(request.request_id, request.backend, None,
                                time.monotonic() - started, attempt, "failed", error)

    def complete_batch(self, requests: Sequence[CompletionRequest], max_in_flight: int | None = None) -> list[CompletionResult]:
        """Run requests concurrently; results come back in request order."""
        if max_in_flight is None:
            max_in_flight = self.max_in_flight
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        requests = list(requests)
        if not requests:
            return []
        for req in requests:
            self._resolve(req.backend)
        names = sorted({r.backend for r in requests})
        limits = {n: threading.BoundedSemaphore(max_in_flight) for n in names}
        workers = max_in_flight * len(names)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(self.complete, r, limits[r.backend]) for r in requests]
            return [f.result() for f in futures]

    def health(self, name: str) -> tuple[bool, str]:
        _, backend = self._resolve(name)
        return backend.health()

    def close(self):
        for backend in self.backends.values():
            backend.close()
