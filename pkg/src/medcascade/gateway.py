"""Uniform LLM access: retries, rate limiting, on-disk response cache, and a
deterministic mock backend.

The mock backend understands three prompt sentinels (``REFINE:``,
``SUMMARIZE:``, ``NER:``) and applies a fixed pure transformation to the
payload after the sentinel, so every downstream stage is reproducible without
network access.  Live backends speak chat/completions-style HTTP JSON;
endpoint and key come from config with environment overrides
(``MEDCASCADE_LLM_URL``, ``MEDCASCADE_LLM_KEY``).
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

from .errors import (AuthError, BackendUnavailable, ResponseEmpty, UnknownBackend,
                     UnknownSentinel)

ENV_URL = "MEDCASCADE_LLM_URL"
ENV_KEY = "MEDCASCADE_LLM_KEY"

_LEXICON_PATH = os.path.join(os.path.dirname(__file__), "data", "symptom_lexicon.txt")


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_output_tokens: int = 512
    temperature: float = 0.0
    backend_id: str = "mock"
    reproducible: bool = True

    def validate(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.reproducible and self.temperature != 0.0:
            raise ValueError("reproducible requests require temperature 0")


def cache_key(req: CompletionRequest) -> str:
    """Stable content hash over (prompt, parameters, backend_id)."""
    canon = json.dumps({"prompt": req.prompt, "max_output_tokens": req.max_output_tokens,
                        "temperature": req.temperature, "backend_id": req.backend_id},
                       sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass
class CacheEntry:
    key: str
    response: str
    created_at: float


class ResponseCache:
    """Content-addressed on-disk cache, one JSON file per key.

    Writes go through temp + rename, so concurrent writers can at worst
    duplicate work, never corrupt an entry.
    """

    def __init__(self, directory: str):
        self.directory = str(directory)
        os.makedirs(self.directory, exist_ok=True)

    def _path(self, key: str) -> str:
        return os.path.join(self.directory, f"{key}.json")

    def get(self, key: str) -> str | None:
        path = self._path(key)
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)["response"]

    def put(self, key: str, response: str, req: CompletionRequest) -> None:
        entry = {"key": key, "response": response, "created_at": time.time(),
                 "request": {"prompt": req.prompt, "max_output_tokens": req.max_output_tokens,
                             "temperature": req.temperature, "backend_id": req.backend_id}}
        tmp = self._path(key) + f".tmp.{os.getpid()}.{threading.get_ident()}"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(entry, fh, ensure_ascii=False, sort_keys=True)
        os.replace(tmp, self._path(key))

    def __contains__(self, key: str) -> bool:
        return os.path.exists(self._path(key))


class TokenBucket:
    """Simple thread-safe token bucket; serializes backend dispatch."""

    def __init__(self, rate_per_sec: float = 50.0, burst: float = 10.0,
                 clock=time.monotonic, sleep=time.sleep):
        self.rate = rate_per_sec
        self.capacity = burst
        self.tokens = burst
        self.updated = clock()
        self.clock = clock
        self.sleep = sleep
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


class TransientBackendError(Exception):
    """Retryable failure (connection trouble, 429/5xx)."""


# -- mock backend ------------------------------------------------------------

_SENTINELS = ("REFINE:", "SUMMARIZE:", "NER:")
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?؟])\s+")
_TOKEN_EDGE_PUNCT = ".,;:!?،؛()[]{}\"'«»"

AGE_KEYWORDS = ("سنة", "سنه", "عام", "عاما", "عامًا", "سنين", "years", "year", "yrs", "yr")


def load_symptom_lexicon(path: str | None = None) -> set[str]:
    terms = set()
    with open(path or _LEXICON_PATH, encoding="utf-8") as fh:
        for line in fh:
            term = line.strip().lower()
            if term and not term.startswith("#"):
                terms.add(term)
    return terms


class MockBackend:
    """Pure, deterministic stand-in for the completion LLM.

    REFINE    -> whitespace-normalized payload, prefixed with an ``Age: N``
                 header when a digit run is followed by an age keyword.
    SUMMARIZE -> first two sentences of the payload.
    NER       -> comma-joined payload tokens found in the symptom lexicon
                 (every occurrence, original surface form).
    """

    backend_id = "mock"
    prompt_style = "sentinel"

    def __init__(self, lexicon: set[str] | None = None):
        self.lexicon = lexicon if lexicon is not None else load_symptom_lexicon()

    def complete(self, req: CompletionRequest) -> str:
        for sentinel in _SENTINELS:
            if req.prompt.startswith(sentinel):
                payload = req.prompt[len(sentinel):].strip()
                if sentinel == "REFINE:":
                    return self._refine(payload)
                if sentinel == "SUMMARIZE:":
                    return self._summarize(payload)
                return self._ner(payload)
        head = req.prompt.split(":", 1)[0][:32]
        raise UnknownSentinel(f"mock backend knows {_SENTINELS}, got {head!r}")

    @staticmethod
    def _refine(payload: str) -> str:
        tokens = payload.split()
        normalized = " ".join(tokens)
        ages = []
        for i, tok in enumerate(tokens[:-1]):
            word = tok.strip(_TOKEN_EDGE_PUNCT)
            nxt = tokens[i + 1].strip(_TOKEN_EDGE_PUNCT).lower()
            if word.isdigit() and any(nxt.startswith(k) for k in AGE_KEYWORDS):
                ages.append(word)
        if ages:
            return f"Age: {', '.join(ages)}\n{normalized}"
        return normalized

    @staticmethod
    def _summarize(payload: str) -> str:
        sentences = _SENTENCE_SPLIT.split(payload.strip())
        return " ".join(sentences[:2])

    def _ner(self, payload: str) -> str:
        hits = []
        for tok in payload.split():
            word = tok.strip(_TOKEN_EDGE_PUNCT)
            if word and word.lower() in self.lexicon:
                hits.append(word)
        return ", ".join(hits)


# -- live backends -----------------------------------------------------------

def _http_post_json(url: str, body: dict, headers: dict, timeout: float) -> dict:
    data = json.dumps(body).encode("utf-8")
    request = urllib.request.Request(url, data=data,
                                     headers={"Content-Type": "application/json", **headers})
    try:
        with urllib.request.urlopen(request, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as e:
        if e.code in (401, 403):
            raise AuthError(f"HTTP {e.code} from {url}") from e
        if e.code in (408, 429) or e.code >= 500:
            raise TransientBackendError(f"HTTP {e.code}") from e
        raise BackendUnavailable(f"HTTP {e.code} from {url}") from e
    except urllib.error.URLError as e:
        raise TransientBackendError(str(e)) from e


class OpenAIChatBackend:
    """Chat/completions JSON protocol (OpenAI-compatible servers)."""

    prompt_style = "instruct"

    def __init__(self, backend_id: str, url: str, api_key: str = "", model: str = "",
                 timeout: float = 60.0):
        self.backend_id = backend_id
        self.url = url
        self.api_key = api_key
        self.model = model
        self.timeout = timeout

    def complete(self, req: CompletionRequest) -> str:
        body = {"model": self.model, "temperature": req.temperature,
                "max_tokens": req.max_output_tokens,
                "messages": [{"role": "user", "content": req.prompt}]}
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        data = _http_post_json(self.url, body, headers, self.timeout)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise BackendUnavailable(f"unexpected response shape: {e}") from e


class LlamaServerBackend:
    """llama.cpp-style /completion JSON protocol."""

    prompt_style = "instruct"

    def __init__(self, backend_id: str, url: str, api_key: str = "", timeout: float = 60.0):
        self.backend_id = backend_id
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def complete(self, req: CompletionRequest) -> str:
        body = {"prompt": req.prompt, "temperature": req.temperature,
                "n_predict": req.max_output_tokens}
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        data = _http_post_json(self.url, body, headers, self.timeout)
        content = data.get("content")
        if content is None:
            raise BackendUnavailable("response has no 'content' field")
        return content


# -- gateway -----------------------------------------------------------------

@dataclass
class RetryPolicy:
    max_retries: int = 3
    base_delay: float = 0.5
    factor: float = 2.0
    max_delay: float = 8.0

    def delays(self):
        d = self.base_delay
        for _ in range(self.max_retries):
            yield min(d, self.max_delay)
            d *= self.factor


class Gateway:
    """Front door for completions: cache -> rate limit -> backend with retries."""

    def __init__(self, cache: ResponseCache | None = None,
                 rate_limiter: TokenBucket | None = None,
                 retry: RetryPolicy | None = None, sleep=time.sleep):
        self.backends: dict[str, object] = {}
        self.cache = cache
        self.rate_limiter = rate_limiter or TokenBucket()
        self.retry = retry or RetryPolicy()
        self.sleep = sleep
        self.backend_calls = 0
        self.cache_hits = 0

    def register_backend(self, backend) -> None:
        self.backends[backend.backend_id] = backend

    def backend(self, backend_id: str):
        try:
            return self.backends[backend_id]
        except KeyError:
            raise UnknownBackend(f"backend {backend_id!r} not registered") from None

    def prompt_style(self, backend_id: str) -> str:
        return getattr(self.backend(backend_id), "prompt_style", "instruct")

    def complete(self, req: CompletionRequest) -> str:
        req.validate()
        backend = self.backend(req.backend_id)
        key = cache_key(req)
        if self.cache is not None:
            cached = self.cache.get(key)
            if cached is not None:
                self.cache_hits += 1
                return cached

        self.rate_limiter.acquire()
        delays = self.retry.delays()
        last_error: Exception | None = None
        for attempt in range(self.retry.max_retries + 1):
            try:
                self.backend_calls += 1
                response = backend.complete(req)
                break
            except TransientBackendError as e:
                last_error = e
                try:
                    delay = next(delays)
                except StopIteration:
                    delay = None
                if attempt >= self.retry.max_retries or delay is None:
                    raise BackendUnavailable(
                        f"backend {req.backend_id!r} failed after "
                        f"{attempt + 1} attempts: {last_error}") from e
                self.sleep(delay)
        else:  # pragma: no cover - loop always breaks or raises
            raise BackendUnavailable(str(last_error))

        if not response or not response.strip():
            raise ResponseEmpty(f"backend {req.backend_id!r} returned an empty completion")
        if self.cache is not None:
            self.cache.put(key, response, req)
        return response


def mock_complete(req: CompletionRequest) -> str:
    """Run the mock transformation directly (no cache, no retries)."""
    return MockBackend().complete(req)


@dataclass
class GatewayConfig:
    backend: str = "mock"                 # mock | openai | llama
    url: str = ""
    api_key: str = ""
    model: str = ""
    cache_dir: str = ""
    rate_per_sec: float = 50.0
    burst: float = 10.0
    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    lexicon_path: str = ""
    extra: dict = field(default_factory=dict)


def build_gateway(cfg: GatewayConfig) -> Gateway:
    """Assemble a gateway from config; env vars override url/key for live backends."""
    cache = ResponseCache(cfg.cache_dir) if cfg.cache_dir else None
    limiter = TokenBucket(cfg.rate_per_sec, cfg.burst)
    retry = RetryPolicy(max_retries=cfg.max_retries, base_delay=cfg.backoff_base,
                        max_delay=cfg.backoff_cap)
    gw = Gateway(cache=cache, rate_limiter=limiter, retry=retry)
    if cfg.backend == "mock":
        lexicon = load_symptom_lexicon(cfg.lexicon_path) if cfg.lexicon_path else None
        gw.register_backend(MockBackend(lexicon))
    elif cfg.backend in ("openai", "llama"):
        url = os.environ.get(ENV_URL, cfg.url)
        key = os.environ.get(ENV_KEY, cfg.api_key)
        if not url:
            raise UnknownBackend(f"live backend {cfg.backend!r} needs a url "
                                 f"(config gateway.url or ${ENV_URL})")
        if cfg.backend == "openai":
            gw.register_backend(OpenAIChatBackend(cfg.backend, url, key, cfg.model))
        else:
            gw.register_backend(LlamaServerBackend(cfg.backend, url, key))
    else:
        raise UnknownBackend(f"unknown gateway backend {cfg.backend!r}")
    return gw
