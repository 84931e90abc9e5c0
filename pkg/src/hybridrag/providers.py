"""Embedding and chat-completion backends.

``HTTPProvider`` speaks the common JSON chat/embeddings protocol. The local
providers (``HashEmbedder``, ``ScriptedChat``, ``CallableChat``) need no
network and are bit-deterministic, which is what the test-suite and the
shipped fixtures rely on.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import httpx

from hybridrag.errors import FixtureError, LoadError, ProtocolError, ProviderError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_id: str = ""
    dim: int = 0

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", values)
        if self.dim == 0:
            object.__setattr__(self, "dim", len(values))
        if self.dim <= 0 or len(values) != self.dim:
            raise ValueError(f"embedding has {len(values)} values but dim {self.dim}")
        if not all(math.isfinite(v) for v in values):
            raise ValueError("embedding values must be finite")


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass
class ProviderConfig:
    endpoint_url: str
    model_name: str
    api_key_env_var: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    backoff_base: float = 0.5
    backoff_cap: float = 20.0

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")


class Embedder(Protocol):
    model_id: str

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


class ChatProvider(Protocol):
    def chat(self, req: ChatRequest) -> str: ...


def _vector_values(v) -> tuple[float, ...]:
    return v.values if isinstance(v, EmbeddingVector) else tuple(float(x) for x in v)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Accepts ``EmbeddingVector`` instances or plain sequences. Sums use
    ``math.fsum`` so the result does not depend on summation order.
    """
    av, bv = _vector_values(a), _vector_values(b)
    if len(av) != len(bv):
        raise ValueError(f"dimension mismatch: {len(av)} != {len(bv)}")
    na = math.sqrt(math.fsum(x * x for x in av))
    nb = math.sqrt(math.fsum(y * y for y in bv))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    dot = math.fsum(x * y for x, y in zip(av, bv))
    return max(-1.0, min(1.0, dot / (na * nb)))


def _check_texts(texts: Sequence[str]) -> list[str]:
    texts = list(texts)
    if not texts:
        raise ValueError("embed() requires at least one text")
    for i, t in enumerate(texts):
        if not isinstance(t, str) or not t.strip():
            raise ValueError(f"text {i} is empty")
    return texts


_TOKEN_STRIP = "".join(chr(c) for c in range(33, 127) if not chr(c).isalnum())


def hash_tokens(text: str) -> list[str]:
    tokens = [t.strip(_TOKEN_STRIP).lower() for t in text.split()]
    return [t for t in tokens if t]


class HashEmbedder:
    """Signed hash-projection embedder.

    Each whitespace token (lowercased, edge punctuation stripped) is hashed
    with keyed BLAKE2b into one of ``dim`` buckets with a sign taken from the
    top hash bit; the signed counts are L2-normalised.
    """

    def __init__(self, dim: int = 64, seed: str = "hybridrag"):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._key = seed.encode("utf-8")[:64]
        self.model_id = f"hash-{dim}"

    def _bucket(self, token: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), key=self._key, digest_size=8).digest(), "big")
        return h % self.dim, (-1.0 if h >> 63 else 1.0)

    def _embed_one(self, text: str) -> EmbeddingVector:
        tokens = hash_tokens(text) or [text.strip()]
        counts = [0.0] * self.dim
        for token in tokens:
            bucket, sign = self._bucket(token)
            counts[bucket] += sign
        norm = math.sqrt(math.fsum(c * c for c in counts))
        if norm == 0.0:
            # all tokens cancelled out; fall back to the whole text as one token
            bucket, sign = self._bucket(text.strip().lower())
            counts = [0.0] * self.dim
            counts[bucket] = sign
            norm = 1.0
        return EmbeddingVector(tuple(c / norm for c in counts), self.model_id, self.dim)

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [self._embed_one(t) for t in _check_texts(texts)]


def _normalize_prompt(text: str) -> str:
    return "\n".join(line.rstrip() for line in text.strip().splitlines())


def prompt_digest(system_prompt: str, user_prompt: str) -> str:
    payload = json.dumps([_normalize_prompt(system_prompt), _normalize_prompt(user_prompt)], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ScriptedChat:
    """Replays canned responses keyed by the digest of (system, user) prompts."""

    def __init__(self, responses: dict[str, str] | None = None):
        self._responses = dict(responses or {})

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str, str]]) -> ScriptedChat:
        return cls({prompt_digest(s, u): r for s, u, r in pairs})

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedChat:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise LoadError(path, f"scripted fixture file not found: {path}") from None
        if not isinstance(data, dict):
            raise LoadError(path, f"scripted fixture file {path} must be a JSON object")
        return cls(data)

    def add(self, system_prompt: str, user_prompt: str, response: str) -> None:
        self._responses[prompt_digest(system_prompt, user_prompt)] = response

    def __len__(self) -> int:
        return len(self._responses)

    def chat(self, req: ChatRequest) -> str:
        digest = prompt_digest(req.system_prompt, req.user_prompt)
        try:
            return self._responses[digest]
        except KeyError:
            raise FixtureError(digest) from None


class CallableChat:
    """Adapts a plain function ``(ChatRequest) -> str`` to the chat interface."""

    def __init__(self, fn: Callable[[ChatRequest], str]):
        self._fn = fn

    def chat(self, req: ChatRequest) -> str:
        return self._fn(req)


class RecordingChat:
    """Wraps a chat provider and records every exchange for later replay."""

    def __init__(self, inner: ChatProvider):
        self.inner = inner
        self.recorded: dict[str, str] = {}
        self._lock = threading.Lock()

    def chat(self, req: ChatRequest) -> str:
        response = self.inner.chat(req)
        with self._lock:
            self.recorded[prompt_digest(req.system_prompt, req.user_prompt)] = response
        return response

    def dump(self, path: str | Path) -> None:
        text = json.dumps(dict(sorted(self.recorded.items())), indent=1, ensure_ascii=False)
        Path(path).write_text(text + "\n", encoding="utf-8")


_SECRET = re.compile(r"(Bearer\s+)\S+")


class HTTPProvider:
    """Client for an OpenAI-compatible ``/chat/completions`` + ``/embeddings`` API."""

    def __init__(self, config: ProviderConfig, client: httpx.Client | None = None):
        self.config = config
        self.model_id = config.model_name
        self._client = client or httpx.Client(timeout=config.timeout)
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._dim: int | None = None

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env_var)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _url(self, path: str) -> str:
        return self.config.endpoint_url.rstrip("/") + path

    def _post(self, path: str, body: dict) -> dict:
        url = self._url(path)
        attempts = self.config.max_retries + 1
        last_error = ""
        for attempt in range(1, attempts + 1):
            if logger.isEnabledFor(logging.DEBUG):
                logger.debug("POST %s attempt %d body=%s", url, attempt, _SECRET.sub(r"\1***", json.dumps(body)))
            try:
                with self._slots:
                    resp = self._client.post(url, json=body, headers=self._headers())
                if resp.status_code < 300:
                    try:
                        data = resp.json()
                    except ValueError as exc:
                        raise ProtocolError(f"non-JSON response from {url}: {exc}", attempt) from None
                    logger.debug("response from %s: %s", url, resp.text[:2000])
                    return data
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if resp.status_code < 500 and resp.status_code != 429:
                    raise ProviderError(f"{url} returned {last_error}", attempt)
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            if attempt < attempts:
                delay = min(self.config.backoff_cap, self.config.backoff_base * 2 ** (attempt - 1))
                time.sleep(delay * random.uniform(0.5, 1.0))
        raise ProviderError(f"{url} failed after {attempts} attempts ({last_error})", attempts)

    def chat(self, req: ChatRequest) -> str:
        body = {
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        data = self._post("/chat/completions", body)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProtocolError(f"chat response missing choices[0].message.content: {str(data)[:200]}") from None
        if not isinstance(content, str):
            raise ProtocolError("chat response content is not a string")
        return content

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        texts = _check_texts(texts)
        data = self._post("/embeddings", {"model": self.config.model_name, "input": texts})
        try:
            rows = sorted(data["data"], key=lambda r: r.get("index", 0))
            raw = [row["embedding"] for row in rows]
        except (KeyError, TypeError, AttributeError):
            raise ProtocolError(f"embedding response missing data[].embedding: {str(data)[:200]}") from None
        if len(raw) != len(texts):
            raise ProtocolError(f"requested {len(texts)} embeddings, received {len(raw)}")
        dims = {len(v) for v in raw}
        if len(dims) != 1:
            raise ProtocolError(f"embedding batch has mixed dimensions {sorted(dims)}")
        dim = dims.pop()
        if self._dim is None:
            self._dim = dim
        elif dim != self._dim:
            raise ProtocolError(f"embedding dimension changed from {self._dim} to {dim}")
        return [EmbeddingVector(tuple(v), self.model_id, dim) for v in raw]

    def close(self) -> None:
        self._client.close()
