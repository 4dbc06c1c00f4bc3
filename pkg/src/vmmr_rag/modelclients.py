"""Describer and reasoner backends, prompt construction, and answer parsing.

Remote backends speak the OpenAI-compatible ``/v1/chat/completions``
protocol. Fixture backends read recorded text from disk: descriptions are
keyed by query id and reasoner responses by a hash of the exact prompt, so
any drift in prompt construction surfaces as a missing fixture.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import mimetypes
import os
import re
import string
import threading
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import httpx

from .domain import Description, LabelSet, Prediction, QueryInput, VehicleLabel
from .errors import (
    BackendProtocolError,
    BackendUnreachable,
    ConfigError,
    EmptyDescription,
    InvalidInput,
    MissingFixture,
    TemplateRenderError,
)
from .index import RetrievalHit
from .kb import KnowledgeBase

log = logging.getLogger(__name__)

NO_CONTEXT_SENTINEL = "No reference entries available."
PLACEHOLDERS = frozenset({"description", "candidates", "label_list"})


@dataclass(frozen=True)
class ChatBackendConfig:
    kind: Literal["remote", "fixture"] = "fixture"
    endpoint_url: str = ""
    model_name: str = ""
    api_key_env_var: str = ""
    timeout_ms: int = 60_000
    fixture_dir: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 512

    def __post_init__(self) -> None:
        if self.kind not in ("remote", "fixture"):
            raise ConfigError(f"unknown chat backend kind {self.kind!r}")
        if self.temperature < 0 or self.max_output_tokens <= 0 or self.timeout_ms <= 0:
            raise ConfigError("temperature must be >= 0; max_output_tokens, timeout_ms > 0")
        if self.kind == "remote" and not (self.endpoint_url and self.model_name):
            raise ConfigError("remote chat backend needs endpoint_url and model_name")
        if self.kind == "fixture" and not self.fixture_dir:
            raise ConfigError("fixture chat backend needs fixture_dir")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ChatBackendConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown chat config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    template_text: str

    @property
    def fields(self) -> set[str]:
        try:
            parsed = list(string.Formatter().parse(self.template_text))
        except ValueError as exc:
            raise TemplateRenderError(f"template {self.name!r}: {exc}") from exc
        return {f for _, f, _, _ in parsed if f is not None}

    def render(self, **values: str) -> str:
        missing = self.fields - values.keys()
        if missing:
            raise TemplateRenderError(
                f"template {self.name!r} references unset placeholder(s) {sorted(missing)}"
            )
        try:
            return self.template_text.format_map(values)
        except (KeyError, IndexError, ValueError) as exc:
            raise TemplateRenderError(f"template {self.name!r}: {exc}") from exc


DEFAULT_DESCRIBER_TEMPLATE = PromptTemplate(
    "describer-front-v1",
    "Describe the front end of the vehicle in this image in one paragraph. "
    "Cover only exterior features: the shape of the headlights and whether they "
    "are split, the outline and texture of the grille, the geometry of the bumper "
    "and air intakes, any creases on the hood, and where the badge sits. "
    "Do not name any brand, make or model.",
)

DEFAULT_REASONER_TEMPLATE = PromptTemplate(
    "reasoner-compare-v1",
    "You identify vehicle make and model from a written description.\n\n"
    "Query description:\n{description}\n\n"
    "Reference entries:\n{candidates}\n\n"
    "Compare the query description with each reference entry feature by feature "
    "(headlights, grille, bumper and air intakes, hood, badge). Choose the single "
    "reference entry that matches best. Finish with exactly one line of the form\n"
    "ANSWER: <make> <model>\n"
    "using a make and model from the reference entries.",
)


def prompt_hash(prompt: str) -> str:
    """Stable 16-hex-digit key for a prompt (prefix of its SHA-256)."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


def _one_line(text: str) -> str:
    return " ".join(text.split())


def format_candidates(
    hits: Sequence[RetrievalHit], kb: KnowledgeBase, labels_only: bool = False
) -> str:
    if not hits:
        return NO_CONTEXT_SENTINEL
    blocks = []
    for i, hit in enumerate(hits, 1):
        rec = kb.get(hit.record_id)
        if labels_only:
            blocks.append(f"[{i}] {rec.label.display}")
        else:
            blocks.append(f"[{i}] {rec.label.display}: {_one_line(rec.description.text)}")
    return "\n".join(blocks)


def build_prompt(
    description: Description,
    hits: Sequence[RetrievalHit],
    kb: KnowledgeBase,
    template: PromptTemplate = DEFAULT_REASONER_TEMPLATE,
    *,
    labels_only: bool = False,
) -> str:
    return template.render(
        description=description.text.strip(),
        candidates=format_candidates(hits, kb, labels_only),
        label_list=", ".join(label.display for label in kb.label_set),
    )


class FixtureChatClient:
    """Reads recorded describer/reasoner outputs from ``fixture_dir``.

    Layout: ``descriptions/<query_id>.txt`` and ``responses/<prompt_hash>.txt``.
    """

    def __init__(self, config: ChatBackendConfig):
        self.config = config
        self.root = Path(config.fixture_dir)
        self.describe_calls = 0
        self.reason_calls = 0
        self._lock = threading.Lock()

    def describe(self, query: QueryInput, template: PromptTemplate) -> Description:
        with self._lock:
            self.describe_calls += 1
        candidates = [self.root / "descriptions" / f"{query.id}.txt", self.root / f"{query.id}.txt"]
        for path in candidates:
            if path.is_file():
                text = path.read_text(encoding="utf-8")
                if not text.strip():
                    raise EmptyDescription(f"fixture {path} is blank")
                return Description(text, "fixture")
        raise MissingFixture(f"no description fixture for query {query.id!r} under {self.root}")

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.reason_calls += 1
        key = prompt_hash(prompt)
        path = self.root / "responses" / f"{key}.txt"
        if not path.is_file():
            raise MissingFixture(f"no recorded response for prompt hash {key} under {self.root}")
        return path.read_text(encoding="utf-8")


def image_data_url(image: str) -> str:
    """Turn a file path, data URL, or bare base64 string into a data URL."""
    if image.startswith("data:"):
        return image
    path = Path(image)
    try:
        is_file = path.is_file()
    except OSError:
        is_file = False
    if is_file:
        mime = mimetypes.guess_type(path.name)[0] or "image/jpeg"
        encoded = base64.b64encode(path.read_bytes()).decode("ascii")
        return f"data:{mime};base64,{encoded}"
    try:
        base64.b64decode(image, validate=True)
    except ValueError:
        raise InvalidInput(f"image {image[:60]!r} is neither a readable file nor base64") from None
    return f"data:image/jpeg;base64,{image}"


class RemoteChatClient:
    def __init__(
        self,
        config: ChatBackendConfig,
        slots: threading.Semaphore | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.config = config
        self.describe_calls = 0
        self.reason_calls = 0
        self._slots = slots or threading.BoundedSemaphore(4)
        self._lock = threading.Lock()
        self._seen: dict[str, str] = {}
        self._client = httpx.Client(timeout=config.timeout_ms / 1000.0, transport=transport)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env_var:
            key = os.environ.get(self.config.api_key_env_var)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _chat(self, content: str | list[dict[str, Any]]) -> str:
        url = self.config.endpoint_url.rstrip("/") + "/v1/chat/completions"
        body = {
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
            "messages": [{"role": "user", "content": content}],
        }
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
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendProtocolError(f"malformed chat response from {url}") from exc
            if text is None:
                text = ""
            if not isinstance(text, str):
                raise BackendProtocolError("chat response content is not text")
            return text
        raise BackendUnreachable(f"{url}: {last}")

    def describe(self, query: QueryInput, template: PromptTemplate) -> Description:
        if query.image is None:
            raise InvalidInput(f"query {query.id!r} has no image payload")
        with self._lock:
            self.describe_calls += 1
        content = [
            {"type": "text", "text": template.render(description="", candidates="", label_list="")},
            {"type": "image_url", "image_url": {"url": image_data_url(query.image)}},
        ]
        for _attempt in range(2):
            text = self._chat(content)
            if text.strip():
                return Description(text.strip(), "generated")
            log.warning("describer returned blank text for %s", query.id)
        raise EmptyDescription(f"describer returned blank text twice for {query.id!r}")

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.reason_calls += 1
        text = self._chat(prompt)
        key = prompt_hash(prompt)
        with self._lock:
            previous = self._seen.setdefault(key, text)
        if previous != text and self.config.temperature == 0:
            log.warning("nondeterministic reasoner output for prompt %s", key)
        return text

    def close(self) -> None:
        self._client.close()


ChatClient = FixtureChatClient | RemoteChatClient


def make_chat_client(
    config: ChatBackendConfig,
    slots: threading.Semaphore | None = None,
    transport: httpx.BaseTransport | None = None,
) -> ChatClient:
    if config.kind == "fixture":
        return FixtureChatClient(config)
    return RemoteChatClient(config, slots=slots, transport=transport)


def describe_image(
    backend: ChatBackendConfig | ChatClient,
    query: QueryInput,
    template: PromptTemplate = DEFAULT_DESCRIBER_TEMPLATE,
) -> Description:
    client = make_chat_client(backend) if isinstance(backend, ChatBackendConfig) else backend
    return client.describe(query, template)


def reason(backend: ChatBackendConfig | ChatClient, prompt: str) -> str:
    if not prompt.strip():
        raise InvalidInput("prompt is empty")
    client = make_chat_client(backend) if isinstance(backend, ChatBackendConfig) else backend
    return client.complete(prompt)


# Answer parsing. Text is compared as sequences of lowercase alphanumeric
# tokens so that casing, spacing and punctuation differences do not matter.

_TOKEN = re.compile(r"[^\W_]+")
_ANSWER = re.compile(r"answer\s*[:\-]", re.IGNORECASE)


def _tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _mentions(tokens: list[str], phrase: list[str]) -> bool:
    if not phrase:
        return False
    m = len(phrase)
    if any(tokens[i:i + m] == phrase for i in range(len(tokens) - m + 1)):
        return True
    # "SupraGRMN" for "Supra GRMN"
    return m > 1 and "".join(phrase) in tokens


def _unique(labels: Iterable[VehicleLabel], tokens: list[str], phrase_of) -> VehicleLabel | None:
    hits = {label.canonical_id: label for label in labels if _mentions(tokens, phrase_of(label))}
    return next(iter(hits.values())) if len(hits) == 1 else None


def parse_prediction(
    raw: str,
    candidates: Sequence[VehicleLabel],
    full_label_set: LabelSet,
) -> Prediction:
    """Map free-form reasoner text onto the closed label set.

    Only the text after the last ``ANSWER:`` marker is inspected when one is
    present. Rules, first match wins:

    1. ``canonical``: exactly one label's full make + model is mentioned.
    2. ``unique-candidate``: exactly one retrieved candidate's model name is mentioned.
    3. ``unique-global``: exactly one label in the full set has its model name mentioned.
    4. ``abstain``.
    """
    raw = raw if isinstance(raw, str) else ""
    markers = list(_ANSWER.finditer(raw))
    region = raw[markers[-1].end():] if markers else raw
    tokens = _tokens(region)

    pool = list(full_label_set) if len(full_label_set) else list(candidates)
    allowed = {label.canonical_id for label in pool}
    cands = [c for c in candidates if c.canonical_id in allowed]

    def full_phrase(label: VehicleLabel) -> list[str]:
        return _tokens(label.make) + _tokens(label.model)

    def model_phrase(label: VehicleLabel) -> list[str]:
        return _tokens(label.model)

    label = _unique(pool, tokens, full_phrase)
    if label is not None:
        return Prediction(label, "canonical", raw)
    label = _unique(cands, tokens, model_phrase)
    if label is not None:
        return Prediction(label, "unique-candidate", raw)
    label = _unique(pool, tokens, model_phrase)
    if label is not None:
        return Prediction(label, "unique-global", raw)
    return Prediction(None, "abstain", raw)
