"""Exact flat cosine index over unit-norm vectors."""

from __future__ import annotations

import threading
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embed import NORM_TOLERANCE
from .errors import CorruptIndexFile, DimensionMismatch, DuplicateRecordId, InvalidInput
from .fsutil import atomic_write_text

MAGIC = "RAGIDX"
VERSION = "1"


@dataclass(frozen=True)
class RetrievalHit:
    record_id: str
    score: float
    rank: int

    def to_dict(self) -> dict:
        return {"record_id": self.record_id, "score": self.score, "rank": self.rank}


class VectorIndex:
    """Insertion-ordered store of (record_id, unit vector) pairs.

    Searches compute every similarity in float64 and sort with a stable
    sort, so equal scores come back in insertion order.
    """

    def __init__(self, dim: int):
        if dim <= 0:
            raise InvalidInput("index dim must be positive")
        self.dim = dim
        self._ids: list[str] = []
        self._pos: dict[str, int] = {}
        self._matrix = np.zeros((0, dim), dtype=np.float64)
        self._write_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    def vector(self, record_id: str) -> np.ndarray:
        return self._matrix[self._pos[record_id]].copy()

    def entries(self) -> Iterable[tuple[str, np.ndarray]]:
        matrix = self._matrix
        for i, rid in enumerate(list(self._ids)):
            yield rid, matrix[i].copy()

    def add(self, record_id: str, vector: np.ndarray) -> None:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimensionMismatch(f"vector has shape {vec.shape}, index dim is {self.dim}")
        if not record_id or any(c in record_id for c in "\t\r\n"):
            raise InvalidInput(f"record id {record_id!r} is empty or contains tab/newline")
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise InvalidInput(f"vector for {record_id!r} has norm {norm}, expected unit norm")
        with self._write_lock:
            if record_id in self._pos:
                raise DuplicateRecordId(record_id)
            # Rebinding instead of mutating keeps concurrent readers on a consistent snapshot.
            self._matrix = np.vstack([self._matrix, vec[None, :]])
            self._pos[record_id] = len(self._ids)
            self._ids = self._ids + [record_id]

    def scores(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"query has shape {q.shape}, index dim is {self.dim}")
        return self._matrix @ q

    def search(self, query: np.ndarray, k: int) -> list[RetrievalHit]:
        if k < 1:
            raise InvalidInput("k must be >= 1")
        ids, matrix = self._ids, self._matrix
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"query has shape {q.shape}, index dim is {self.dim}")
        if not ids:
            return []
        scores = matrix @ q
        order = np.argsort(-scores, kind="stable")[:k]
        return [
            RetrievalHit(record_id=ids[i], score=float(scores[i]), rank=r)
            for r, i in enumerate(order, 1)
        ]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VectorIndex):
            return NotImplemented
        return (
            self.dim == other.dim
            and self._ids == other._ids
            and np.array_equal(self._matrix, other._matrix)
        )

    def dumps(self) -> str:
        lines = [f"{MAGIC} {VERSION} {self.dim} {len(self._ids)}"]
        for rid, vec in zip(self._ids, self._matrix):
            lines.append(rid + "\t" + ",".join(repr(float(v)) for v in vec))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, source: str = "<index>") -> VectorIndex:
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines:
            raise CorruptIndexFile(f"{source}: empty file")
        header = lines[0].split(" ")
        if len(header) != 4 or header[0] != MAGIC:
            raise CorruptIndexFile(f"{source}: bad magic")
        if header[1] != VERSION:
            raise CorruptIndexFile(f"{source}: unsupported version {header[1]!r}")
        try:
            dim, count = int(header[2]), int(header[3])
        except ValueError as exc:
            raise CorruptIndexFile(f"{source}: bad dim/count in header") from exc
        if dim <= 0 or count < 0:
            raise CorruptIndexFile(f"{source}: bad dim {dim} or count {count}")
        body = lines[1:]
        if len(body) != count:
            raise CorruptIndexFile(f"{source}: header says {count} entries, found {len(body)}")
        index = cls(dim)
        for n, line in enumerate(body, 2):
            rid, sep, values = line.partition("\t")
            if not sep:
                raise CorruptIndexFile(f"{source}:{n}: missing tab separator")
            try:
                vec = np.array([float(v) for v in values.split(",")], dtype=np.float64)
            except ValueError as exc:
                raise CorruptIndexFile(f"{source}:{n}: unparseable vector") from exc
            if vec.shape != (dim,):
                raise CorruptIndexFile(f"{source}:{n}: vector has {vec.size} values, dim is {dim}")
            try:
                index.add(rid, vec)
            except (DuplicateRecordId, InvalidInput) as exc:
                raise CorruptIndexFile(f"{source}:{n}: {exc}") from exc
        return index

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> VectorIndex:
        path = Path(path)
        return cls.loads(path.read_text(encoding="utf-8"), str(path))


def index_add(index: VectorIndex, record_id: str, vector: np.ndarray) -> VectorIndex:
    index.add(record_id, vector)
    return index


def index_search(index: VectorIndex, query: np.ndarray, k: int) -> list[RetrievalHit]:
    return index.search(query, k)


def index_save(index: VectorIndex, path: str | Path) -> None:
    index.save(path)


def index_load(path: str | Path) -> VectorIndex:
    return VectorIndex.load(path)
