"""LLM access layer: OpenAI-compatible HTTP backends plus deterministic
transcript replay for tests and reproducible runs.

Every chat call resolves to ``(completion text, Usage)``. Transcripts are
line-delimited JSON keyed by a request fingerprint, so identical requests
always replay identical responses.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import requests

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class TransportError(RuntimeError):
    """Transient transport failure that survived all retries."""


class ApiError(RuntimeError):
    """Non-retryable HTTP error (4xx other than 429); carries the body."""

    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body}")
        self.status = status
        self.body = body


class TranscriptMissError(KeyError):
    def __init__(self, fingerprint: str):
        super().__init__(fingerprint)
        self.fingerprint = fingerprint

    def __str__(self) -> str:
        return f"no transcript entry for request fingerprint {self.fingerprint}"


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def to_dict(self) -> dict:
        return {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens}


ZERO_USAGE = Usage(0, 0)


def merge_usage(a: Usage, b: Usage) -> Usage:
    return Usage(a.prompt_tokens + b.prompt_tokens, a.completion_tokens + b.completion_tokens)


def estimate_tokens(text: str) -> int:
    """Deterministic token estimate: words plus standalone punctuation marks."""
    return len(_TOKEN_RE.findall(text))


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[dict, ...]
    temperature: float = 0.0
    max_tokens: int | None = None

    def __post_init__(self):
        if not self.model:
            raise ValueError("model name must be non-empty")
        if not self.messages:
            raise ValueError("message list must be non-empty")
        for m in self.messages:
            if "role" not in m or "content" not in m:
                raise ValueError("every message needs 'role' and 'content'")
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")


def user_request(model: str, content: str, temperature: float = 0.0, max_tokens: int | None = None) -> ChatRequest:
    return ChatRequest(
        model=model,
        messages=({"role": "user", "content": content},),
        temperature=temperature,
        max_tokens=max_tokens,
    )


def request_fingerprint(model: str, messages: Sequence[dict]) -> str:
    """Stable hash of the model name and concatenated message contents."""
    digest = hashlib.sha256()
    digest.update(model.encode("utf-8"))
    for m in messages:
        digest.update(b"\x00")
        digest.update(m["content"].encode("utf-8"))
    return digest.hexdigest()


def text_fingerprint(model: str, text: str) -> str:
    return request_fingerprint(model, [{"role": "user", "content": text}])


def _with_retries(call, max_attempts: int, backoff_base: float, sleep=time.sleep):
    """Run ``call`` with retries on transport errors and retryable statuses.

    ``call`` returns a requests.Response; a response with a non-retryable
    status is returned to the caller for handling.
    """
    last_error: Exception | None = None
    last_status: int | None = None
    for attempt in range(max_attempts):
        if attempt:
            sleep(backoff_base * (2 ** (attempt - 1)))
        try:
            response = call()
        except requests.RequestException as exc:
            last_error = exc
            continue
        if response.status_code in RETRYABLE_STATUS:
            last_status = response.status_code
            continue
        return response
    if last_status is not None:
        raise TransportError(f"gave up after {max_attempts} attempts; last status {last_status}")
    raise TransportError(f"gave up after {max_attempts} attempts: {last_error}")


class HttpChatBackend:
    """Chat-completions client for an OpenAI-compatible endpoint.

    Credentials come from the named environment variable, never from the
    request itself; a semaphore bounds in-flight requests.
    """

    def __init__(
        self,
        endpoint: str,
        api_key_env: str | None = None,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        max_inflight: int = 8,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._semaphore = threading.Semaphore(max_inflight)
        self.estimated_calls = 0

    def describe(self) -> dict:
        return {"kind": "http", "endpoint": self.endpoint}

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            import os

            key = os.environ.get(self.api_key_env)
            if not key:
                raise ApiError(401, f"environment variable {self.api_key_env!r} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def chat(self, request: ChatRequest) -> tuple[str, Usage]:
        payload: dict = {
            "model": request.model,
            "messages": list(request.messages),
            "temperature": request.temperature,
        }
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens

        def call():
            with self._semaphore:
                return requests.post(
                    f"{self.endpoint}/chat/completions",
                    json=payload,
                    headers=self._headers(),
                    timeout=self.timeout,
                )

        response = _with_retries(call, self.max_attempts, self.backoff_base)
        if response.status_code != 200:
            raise ApiError(response.status_code, response.text)
        body = response.json()
        text = body["choices"][0]["message"]["content"]
        usage = body.get("usage")
        if usage and "prompt_tokens" in usage and "completion_tokens" in usage:
            return text, Usage(int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
        # Documented fallback: provider sent no usage, estimate locally.
        self.estimated_calls += 1
        prompt_est = sum(estimate_tokens(m["content"]) for m in request.messages)
        return text, Usage(prompt_est, estimate_tokens(text))


class HttpEmbedBackend:
    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str | None = None,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        max_inflight: int = 8,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._semaphore = threading.Semaphore(max_inflight)

    def describe(self) -> dict:
        return {"kind": "http", "endpoint": self.endpoint, "model": self.model}

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            import os

            key = os.environ.get(self.api_key_env)
            if not key:
                raise ApiError(401, f"environment variable {self.api_key_env!r} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            return []

        def call():
            with self._semaphore:
                return requests.post(
                    f"{self.endpoint}/embeddings",
                    json={"model": self.model, "input": list(texts)},
                    headers=self._headers(),
                    timeout=self.timeout,
                )

        response = _with_retries(call, self.max_attempts, self.backoff_base)
        if response.status_code != 200:
            raise ApiError(response.status_code, response.text)
        body = response.json()
        vectors = [row["embedding"] for row in body["data"]]
        return _check_uniform(vectors)


def _check_uniform(vectors: list[list[float]]) -> list[list[float]]:
    dims = {len(v) for v in vectors}
    if len(dims) > 1:
        raise ValueError(f"embedding response has inconsistent dimensions: {sorted(dims)}")
    return vectors


def load_transcript(path: str | Path) -> dict[str, dict]:
    entries: dict[str, dict] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid transcript entry: {exc}") from None
            entries[record["fingerprint"]] = record
    return entries


def append_transcript_entry(path: str | Path, entry: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


class TranscriptChatBackend:
    """Deterministic replay of recorded chat completions.

    A lookup miss raises unless a live backend was attached for record
    mode, in which case the live response is appended to the transcript
    and returned.
    """

    def __init__(self, path: str | Path, record_from: HttpChatBackend | None = None):
        self.path = Path(path)
        self.record_from = record_from
        if self.path.exists():
            self._entries = load_transcript(self.path)
        elif record_from is not None:
            self._entries = {}
        else:
            raise FileNotFoundError(f"transcript file not found: {self.path}")
        self._lock = threading.Lock()

    def describe(self) -> dict:
        info = {"kind": "transcript", "path": str(self.path)}
        if self.record_from is not None:
            info["record_from"] = self.record_from.describe()
        return info

    def chat(self, request: ChatRequest) -> tuple[str, Usage]:
        fingerprint = request_fingerprint(request.model, request.messages)
        entry = self._entries.get(fingerprint)
        if entry is None:
            if self.record_from is None:
                raise TranscriptMissError(fingerprint)
            text, usage = self.record_from.chat(request)
            entry = {
                "fingerprint": fingerprint,
                "response": text,
                "prompt_tokens": usage.prompt_tokens,
                "completion_tokens": usage.completion_tokens,
            }
            with self._lock:
                self._entries[fingerprint] = entry
                append_transcript_entry(self.path, entry)
        return entry["response"], Usage(int(entry["prompt_tokens"]), int(entry["completion_tokens"]))


class TranscriptEmbedBackend:
    """Replay embeddings recorded per (model, text) fingerprint."""

    def __init__(self, path: str | Path, model: str, record_from: HttpEmbedBackend | None = None):
        self.path = Path(path)
        self.model = model
        self.record_from = record_from
        if self.path.exists():
            self._entries = load_transcript(self.path)
        elif record_from is not None:
            self._entries = {}
        else:
            raise FileNotFoundError(f"transcript file not found: {self.path}")
        self._lock = threading.Lock()

    def describe(self) -> dict:
        return {"kind": "transcript", "path": str(self.path), "model": self.model}

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            return []
        vectors: list[list[float] | None] = [None] * len(texts)
        missing: list[int] = []
        for i, text in enumerate(texts):
            entry = self._entries.get(text_fingerprint(self.model, text))
            if entry is None:
                missing.append(i)
            else:
                vectors[i] = entry["vector"]
        if missing:
            if self.record_from is None:
                raise TranscriptMissError(text_fingerprint(self.model, texts[missing[0]]))
            fresh = self.record_from.embed([texts[i] for i in missing])
            with self._lock:
                for i, vec in zip(missing, fresh):
                    fingerprint = text_fingerprint(self.model, texts[i])
                    entry = {"fingerprint": fingerprint, "vector": vec}
                    self._entries[fingerprint] = entry
                    append_transcript_entry(self.path, entry)
                    vectors[i] = vec
        return _check_uniform([v for v in vectors if v is not None])
