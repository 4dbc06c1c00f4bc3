"""Shared vocabulary: labels, the closed label set, descriptions, query inputs."""

from __future__ import annotations

import json
import re
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal

from .errors import DuplicateLabel, EmptyLabelPart, InvalidInput, SchemaError

if TYPE_CHECKING:
    from .index import RetrievalHit

_WS = re.compile(r"\s+")

DescriptionSource = Literal["generated", "fixture"]
MatchRule = Literal["canonical", "unique-candidate", "unique-global", "argmax", "abstain"]


def _key_part(text: str) -> str:
    return _WS.sub("-", text.strip().lower())


@dataclass(frozen=True)
class VehicleLabel:
    make: str
    model: str

    def __post_init__(self) -> None:
        if not self.make.strip() or not self.model.strip():
            raise EmptyLabelPart(f"blank label part in ({self.make!r}, {self.model!r})")
        object.__setattr__(self, "make", self.make.strip())
        object.__setattr__(self, "model", self.model.strip())

    @property
    def canonical_id(self) -> str:
        return f"{_key_part(self.make)}/{_key_part(self.model)}"

    @property
    def display(self) -> str:
        return f"{self.make} {self.model}"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VehicleLabel):
            return NotImplemented
        return self.canonical_id == other.canonical_id

    def __hash__(self) -> int:
        return hash(self.canonical_id)

    def __str__(self) -> str:
        return self.canonical_id


def canonicalize_label(make: str, model: str) -> VehicleLabel:
    """Build a label; equality and hashing go through ``canonical_id``.

    ``canonical_id`` lowercases and trims each part, collapses internal
    whitespace runs to ``-`` and joins make and model with ``/``. Non-ASCII
    characters are only lowercased.
    """
    return VehicleLabel(make, model)


@dataclass(frozen=True)
class LabelSet:
    labels: tuple[VehicleLabel, ...] = ()
    _by_id: dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        for i, label in enumerate(labels):
            if label.canonical_id in self._by_id:
                raise DuplicateLabel(f"duplicate label {label.canonical_id}")
            self._by_id[label.canonical_id] = i

    @classmethod
    def of(cls, labels: Iterable[VehicleLabel]) -> LabelSet:
        return cls(tuple(labels))

    @classmethod
    def dedup(cls, labels: Iterable[VehicleLabel]) -> LabelSet:
        """First-seen order, duplicates dropped."""
        seen: dict[str, VehicleLabel] = {}
        for label in labels:
            seen.setdefault(label.canonical_id, label)
        return cls(tuple(seen.values()))

    def with_label(self, label: VehicleLabel) -> LabelSet:
        return LabelSet(self.labels + (label,))

    @property
    def K(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[VehicleLabel]:
        return iter(self.labels)

    def __contains__(self, item: object) -> bool:
        if isinstance(item, VehicleLabel):
            return item.canonical_id in self._by_id
        if isinstance(item, str):
            return item in self._by_id
        return False

    def get(self, canonical_id: str) -> VehicleLabel | None:
        i = self._by_id.get(canonical_id)
        return None if i is None else self.labels[i]

    def index_of(self, label: VehicleLabel | str) -> int:
        key = label.canonical_id if isinstance(label, VehicleLabel) else label
        return self._by_id[key]

    @property
    def ids(self) -> list[str]:
        return [label.canonical_id for label in self.labels]


@dataclass(frozen=True)
class Description:
    text: str
    source: DescriptionSource = "generated"

    def __post_init__(self) -> None:
        if not isinstance(self.text, str) or not self.text.strip():
            raise InvalidInput("description text is empty")
        if self.source not in ("generated", "fixture"):
            raise InvalidInput(f"unknown description source {self.source!r}")


@dataclass(frozen=True)
class QueryInput:
    """One query: an image reference or a pre-written description, never both.

    ``image`` is either a filesystem path or base64-encoded image content.
    """

    id: str
    image: str | None = None
    description: Description | None = None
    true_label: VehicleLabel | None = None

    def __post_init__(self) -> None:
        if not self.id or not self.id.strip():
            raise InvalidInput("query id is empty")
        if (self.image is None) == (self.description is None):
            raise InvalidInput(
                f"query {self.id!r} must carry exactly one of image or description"
            )


@dataclass(frozen=True)
class Prediction:
    """A parsed answer plus everything needed to audit or replay it.

    ``label`` is None for an abstention.
    """

    label: VehicleLabel | None
    match_rule: MatchRule
    raw_reasoner_text: str = ""
    query_id: str = ""
    hits: tuple[RetrievalHit, ...] = ()
    description_used: Description | None = None
    prompt_hash: str = ""
    k: int | None = None
    latency_ms: dict[str, float] = field(default_factory=dict, compare=False, repr=False)

    @property
    def abstained(self) -> bool:
        return self.label is None

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "label": None if self.label is None else self.label.canonical_id,
            "make": None if self.label is None else self.label.make,
            "model": None if self.label is None else self.label.model,
            "match_rule": self.match_rule,
            "raw_reasoner_text": self.raw_reasoner_text,
            "hits": [hit.to_dict() for hit in self.hits],
            "description": None if self.description_used is None else self.description_used.text,
            "description_source": (
                None if self.description_used is None else self.description_used.source
            ),
            "prompt_hash": self.prompt_hash,
            "k": self.k,
        }


def parse_label_lines(lines: Iterable[str], source: str = "<labels>") -> LabelSet:
    labels: list[VehicleLabel] = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise SchemaError(f"{source}:{lineno}: expected 'make<TAB>model'")
        labels.append(canonicalize_label(parts[0], parts[1]))
    return LabelSet.of(labels)


def load_label_file(path: str | Path) -> LabelSet:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        labels = parse_label_lines(fh, str(path))
    if labels.K == 0:
        raise SchemaError(f"{path}: no labels")
    return labels


# Make/model pairs used as the closed set in the reference experiment.
REFERENCE_LABELS: tuple[tuple[str, str], ...] = (
    ("Ferrari", "Purosangue"),
    ("Kia", "EV9"),
    ("Lamborghini", "Revuelto"),
    ("Mazda", "EZ6"),
    ("Mitsubishi", "Xforce"),
    ("Nissan", "Ariya"),
    ("Rolls Royce", "Spectre"),
    ("Toyota", "Supra GRMN"),
    ("Volkswagen", "ID.Buzz"),
    ("Volvo", "EX30"),
)


def reference_label_set() -> LabelSet:
    return LabelSet.of(canonicalize_label(make, model) for make, model in REFERENCE_LABELS)


def load_queries(path: str | Path) -> list[QueryInput]:
    """Read a JSON-lines query file.

    Each line holds ``id`` and one of ``image`` or ``description``, plus
    optional ``make``/``model`` naming the true label.
    """
    path = Path(path)
    queries: list[QueryInput] = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            desc = obj.get("description")
            truth = VehicleLabel(obj["make"], obj["model"]) if obj.get("make") else None
            queries.append(
                QueryInput(
                    id=obj["id"],
                    image=obj.get("image"),
                    description=Description(desc, "fixture") if desc is not None else None,
                    true_label=truth,
                )
            )
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise SchemaError(f"{path}:{n}: bad query line: {exc}") from exc
    return queries


def load_truths(path: str | Path) -> dict[str, VehicleLabel]:
    """Read ``query_id<TAB>make<TAB>model`` lines."""
    path = Path(path)
    truths: dict[str, VehicleLabel] = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise SchemaError(f"{path}:{n}: expected 'query_id<TAB>make<TAB>model'")
        truths[parts[0]] = VehicleLabel(parts[1], parts[2])
    return truths
