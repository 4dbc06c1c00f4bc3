"""The textual knowledge base: labeled description records and their persistence.

On disk a knowledge base is a JSON-lines file (``.kb.jsonl``). The first line
is a header object carrying the format version; every following line is one
self-contained record.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .domain import Description, LabelSet, VehicleLabel
from .embed import Embedder, EmbeddingBackendConfig, make_embedder
from .errors import InvalidInput, SchemaError, UnresolvedRecordId
from .fsutil import atomic_write_text
from .index import VectorIndex

KB_FORMAT = "vmmr-kb"
KB_VERSION = 1
KB_SUFFIX = ".kb.jsonl"
_RECORD_FIELDS = ("record_id", "make", "model", "description", "created_at")
_EMBED_CHUNK = 16


def utc_now() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


def format_rfc3339(ts: datetime) -> str:
    if ts.tzinfo is None:
        raise InvalidInput("timestamps must be timezone-aware")
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def parse_rfc3339(text: str) -> datetime:
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise ValueError("timestamp has no UTC offset")
    return ts.astimezone(timezone.utc)


@dataclass(frozen=True)
class DescriptionRecord:
    record_id: str
    label: VehicleLabel
    description: Description
    created_at: datetime

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "make": self.label.make,
            "model": self.label.model,
            "description": self.description.text,
            "source": self.description.source,
            "created_at": format_rfc3339(self.created_at),
        }

    def embedding_text(self, with_label: bool = False) -> str:
        if not with_label:
            return self.description.text
        # Ablation only: the label tokens end up inside the embedded text.
        return json.dumps(
            {"make": self.label.make, "model": self.label.model,
             "description": self.description.text},
            ensure_ascii=False,
        )


def label_of_record_id(record_id: str) -> str:
    """Canonical id prefix of a generated record id (``kia/ev9#2`` -> ``kia/ev9``)."""
    return record_id.rsplit("#", 1)[0]


class KnowledgeBase:
    def __init__(self, records: list[DescriptionRecord] | None = None):
        self._records: list[DescriptionRecord] = []
        self._by_id: dict[str, DescriptionRecord] = {}
        self._seq: dict[str, int] = {}
        for rec in records or []:
            self._append(rec)

    def _append(self, rec: DescriptionRecord) -> None:
        if rec.record_id in self._by_id:
            raise SchemaError(f"duplicate record id {rec.record_id}")
        self._records.append(rec)
        self._by_id[rec.record_id] = rec
        prefix, _, seq = rec.record_id.rpartition("#")
        if prefix == rec.label.canonical_id and seq.isdigit():
            key = rec.label.canonical_id
            self._seq[key] = max(self._seq.get(key, 0), int(seq))

    @property
    def records(self) -> tuple[DescriptionRecord, ...]:
        return tuple(self._records)

    @property
    def label_set(self) -> LabelSet:
        return LabelSet.dedup(rec.label for rec in self._records)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[DescriptionRecord]:
        return iter(list(self._records))

    def __contains__(self, record_id: object) -> bool:
        return record_id in self._by_id

    def get(self, record_id: str) -> DescriptionRecord:
        try:
            return self._by_id[record_id]
        except KeyError:
            raise UnresolvedRecordId(record_id) from None

    def ingest(
        self,
        label: VehicleLabel,
        description: Description,
        created_at: datetime | None = None,
    ) -> str:
        """Append a record and return its id, ``<canonical_id>#<n>``."""
        seq = self._seq.get(label.canonical_id, 0) + 1
        rid = f"{label.canonical_id}#{seq}"
        while rid in self._by_id:
            seq += 1
            rid = f"{label.canonical_id}#{seq}"
        self._append(DescriptionRecord(rid, label, description, created_at or utc_now()))
        return rid

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeBase):
            return NotImplemented
        return [r.to_json() for r in self._records] == [r.to_json() for r in other._records]

    def dumps(self) -> str:
        lines = [json.dumps({"format": KB_FORMAT, "version": KB_VERSION})]
        lines += [json.dumps(rec.to_json(), ensure_ascii=False) for rec in self._records]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, source: str = "<kb>") -> KnowledgeBase:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise SchemaError(f"{source}: missing header line")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{source}: header is not JSON") from exc
        if not isinstance(header, dict) or header.get("format") != KB_FORMAT:
            raise SchemaError(f"{source}: not a knowledge base file")
        if header.get("version") != KB_VERSION:
            raise SchemaError(f"{source}: unsupported version {header.get('version')!r}")
        kb = cls()
        for i, line in enumerate(lines[1:]):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{source}: record {i}: invalid JSON") from exc
            if not isinstance(obj, dict):
                raise SchemaError(f"{source}: record {i}: not an object")
            missing = [f for f in _RECORD_FIELDS if f not in obj]
            if missing:
                raise SchemaError(f"{source}: record {i}: missing field(s) {', '.join(missing)}")
            try:
                rec = DescriptionRecord(
                    record_id=obj["record_id"],
                    label=VehicleLabel(obj["make"], obj["model"]),
                    description=Description(obj["description"], obj.get("source", "generated")),
                    created_at=parse_rfc3339(obj["created_at"]),
                )
            except (ValueError, TypeError, AttributeError) as exc:
                raise SchemaError(f"{source}: record {i}: {exc}") from exc
            kb._append(rec)
        return kb

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> KnowledgeBase:
        path = Path(path)
        return cls.loads(path.read_text(encoding="utf-8"), str(path))


def kb_ingest(
    kb: KnowledgeBase, label: VehicleLabel, description: Description
) -> tuple[KnowledgeBase, str]:
    rid = kb.ingest(label, description)
    return kb, rid


def kb_save(kb: KnowledgeBase, path: str | Path) -> None:
    kb.save(path)


def kb_load(path: str | Path) -> KnowledgeBase:
    return KnowledgeBase.load(path)


def kb_build_index(
    kb: KnowledgeBase,
    backend: EmbeddingBackendConfig | Embedder,
    *,
    embed_with_label: bool = False,
) -> VectorIndex:
    """Embed every record's text and return a fresh index in record order.

    Embedding chunks may run concurrently on a remote backend; the index is
    only assembled once every chunk has succeeded.
    """
    embedder = make_embedder(backend) if isinstance(backend, EmbeddingBackendConfig) else backend
    records = kb.records
    texts = [rec.embedding_text(embed_with_label) for rec in records]
    chunks = [texts[i:i + _EMBED_CHUNK] for i in range(0, len(texts), _EMBED_CHUNK)]
    workers = embedder.config.max_in_flight if embedder.config.kind == "remote" else 1
    embed_chunk: Callable[[list[str]], list[np.ndarray]] = embedder.embed_many
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(embed_chunk, chunks))
    else:
        results = [embed_chunk(chunk) for chunk in chunks]
    index = VectorIndex(embedder.dim)
    vectors = [vec for chunk in results for vec in chunk]
    for rec, vec in zip(records, vectors):
        index.add(rec.record_id, vec)
    return index
