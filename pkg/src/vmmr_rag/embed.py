"""Text embedding backends and the cosine similarity used for retrieval.

Two backends exist: a deterministic feature-hashing mock for offline runs and
a client for OpenAI-compatible ``/v1/embeddings`` servers. Every vector leaves
this module L2-normalized, so downstream cosine search is a dot product.
"""

from __future__ import annotations

import logging
import os
import re
import threading
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any, Literal

import httpx
import numpy as np

from .errors import (
    BackendProtocolError,
    BackendUnreachable,
    ConfigError,
    DimensionMismatch,
    ZeroVector,
)

log = logging.getLogger(__name__)

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_SPLIT = re.compile(r"[\W_]+")

NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class EmbeddingBackendConfig:
    kind: Literal["remote", "mock"] = "mock"
    dim: int = 64
    endpoint_url: str = ""
    model_name: str = ""
    timeout_ms: int = 30_000
    api_key_env_var: str = ""
    max_in_flight: int = 4
    max_embed_chars: int = 512

    def __post_init__(self) -> None:
        if self.kind not in ("remote", "mock"):
            raise ConfigError(f"unknown embedding backend kind {self.kind!r}")
        if self.dim <= 0 or self.timeout_ms <= 0 or self.max_in_flight <= 0:
            raise ConfigError("dim, timeout_ms and max_in_flight must be positive")
        if self.kind == "remote" and not (self.endpoint_url and self.model_name):
            raise ConfigError("remote embedding backend needs endpoint_url and model_name")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EmbeddingBackendConfig:
        known = cls.__dataclass_fields__.keys()
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown embedding config keys: {sorted(unknown)}")
        return cls(**data)


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return [tok for tok in _TOKEN_SPLIT.split(text.lower()) if tok]


def l2_normalize(values: Sequence[float] | np.ndarray) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0 or not np.isfinite(norm):
        raise ZeroVector("cannot normalize a zero or non-finite vector")
    return vec / norm


def mock_embedding(text: str, dim: int) -> np.ndarray:
    """Signed feature hashing over lowercase alphanumeric tokens.

    Each token's FNV-1a 64-bit hash picks a slot (``hash % dim``) and a sign
    (the top bit: 0 -> +1, 1 -> -1). Text with no tokens maps to ``e_0``.
    """
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokenize(text):
        h = fnv1a_64(tok.encode("utf-8"))
        vec[h % dim] += -1.0 if (h >> 63) & 1 else 1.0
    if not vec.any():
        vec[0] = 1.0
        return vec
    return l2_normalize(vec)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"cannot compare vectors of shape {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return float(np.dot(a, b)) / (na * nb)


def _truncate(text: str, limit: int) -> str:
    if limit > 0 and len(text) > limit:
        log.warning("truncating text of %d chars to %d before embedding", len(text), limit)
        return text[:limit]
    return text


class MockEmbedder:
    def __init__(self, config: EmbeddingBackendConfig):
        self.config = config
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.config.dim

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        with self._lock:
            self.calls += len(texts)
        out = []
        for text in texts:
            if not text.strip():
                raise ValueError("cannot embed empty text")
            out.append(mock_embedding(_truncate(text, self.config.max_embed_chars), self.dim))
        return out


class RemoteEmbedder:
    """Client for an OpenAI-compatible embeddings endpoint."""

    def __init__(
        self,
        config: EmbeddingBackendConfig,
        transport: httpx.BaseTransport | None = None,
    ):
        self.config = config
        self.calls = 0
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._client = httpx.Client(
            timeout=config.timeout_ms / 1000.0,
            transport=transport,
        )

    @property
    def dim(self) -> int:
        return self.config.dim

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env_var:
            key = os.environ.get(self.config.api_key_env_var)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, body: dict[str, Any]) -> Any:
        url = self.config.endpoint_url.rstrip("/") + "/v1/embeddings"
        last: Exception | None = None
        for _attempt in range(2):
            try:
                with self._slots:
                    resp = self._client.post(url, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last = exc
                continue
            if resp.status_code != 200:
                raise BackendProtocolError(f"{url} returned HTTP {resp.status_code}")
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendProtocolError(f"{url} returned non-JSON body") from exc
        raise BackendUnreachable(f"{url}: {last}")

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        if any(not t.strip() for t in texts):
            raise ValueError("cannot embed empty text")
        with self._lock:
            self.calls += len(texts)
        inputs = [_truncate(t, self.config.max_embed_chars) for t in texts]
        payload = self._post({"model": self.config.model_name, "input": inputs})
        try:
            data = payload["data"]
            if len(data) != len(inputs):
                raise BackendProtocolError(
                    f"expected {len(inputs)} embeddings, got {len(data)}"
                )
            if all(isinstance(item.get("index"), int) for item in data):
                data = sorted(data, key=lambda item: item["index"])
            raw = [item["embedding"] for item in data]
        except (KeyError, TypeError, AttributeError) as exc:
            raise BackendProtocolError(f"malformed embeddings response: {exc}") from exc
        out = []
        for values in raw:
            if not isinstance(values, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in values
            ):
                raise BackendProtocolError("embedding is not a list of numbers")
            if len(values) != self.dim:
                raise DimensionMismatch(f"backend returned dim {len(values)}, expected {self.dim}")
            out.append(l2_normalize(values))
        return out

    def close(self) -> None:
        self._client.close()


Embedder = MockEmbedder | RemoteEmbedder


def make_embedder(
    config: EmbeddingBackendConfig, transport: httpx.BaseTransport | None = None
) -> Embedder:
    if config.kind == "mock":
        return MockEmbedder(config)
    return RemoteEmbedder(config, transport=transport)


def embed_text(backend: EmbeddingBackendConfig | Embedder, text: str) -> np.ndarray:
    embedder = make_embedder(backend) if isinstance(backend, EmbeddingBackendConfig) else backend
    return embedder.embed_many([text])[0]
