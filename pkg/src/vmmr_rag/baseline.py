"""Zero-shot similarity baseline: pick the label whose text embedding is
closest to the image embedding.

Embeddings are produced elsewhere (any vision-text model) and handed over in
a paired-embedding file::

    RAGPAIR 1 <dim>
    I<TAB>query_id<TAB>v1,...,vdim
    L<TAB>canonical_id<TAB>prompt_text<TAB>v1,...,vdim
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import LabelSet, Prediction, VehicleLabel
from .embed import NORM_TOLERANCE, l2_normalize
from .errors import (
    DimensionMismatch,
    MissingLabelEmbedding,
    SchemaError,
    UnknownQueryId,
)
from .fsutil import atomic_write_text

log = logging.getLogger(__name__)

MAGIC = "RAGPAIR"
VERSION = "1"
LABEL_PROMPT = "a photo of a {make} {model}"


def default_label_prompt(label: VehicleLabel) -> str:
    return LABEL_PROMPT.format(make=label.make, model=label.model)


def label_from_canonical_id(canonical_id: str) -> VehicleLabel:
    make, sep, model = canonical_id.partition("/")
    if not sep:
        raise SchemaError(f"{canonical_id!r} is not a make/model id")
    return VehicleLabel(make, model)


@dataclass
class PairedEmbeddingSet:
    dim: int
    image_embeddings: dict[str, np.ndarray] = field(default_factory=dict)
    label_embeddings: dict[str, np.ndarray] = field(default_factory=dict)
    label_prompts: dict[str, str] = field(default_factory=dict)
    label_set: LabelSet = field(default_factory=LabelSet)

    def __post_init__(self) -> None:
        self._matrix: np.ndarray | None = None

    def add_image(self, query_id: str, vector) -> None:
        self.image_embeddings[query_id] = self._checked(f"image {query_id}", vector)

    def add_label(self, label: VehicleLabel, vector, prompt_text: str | None = None) -> None:
        cid = label.canonical_id
        self.label_embeddings[cid] = self._checked(f"label {cid}", vector)
        self.label_prompts[cid] = prompt_text if prompt_text is not None else default_label_prompt(label)
        if label not in self.label_set:
            self.label_set = self.label_set.with_label(label)
        self._matrix = None

    def _checked(self, key: str, vector) -> np.ndarray:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimensionMismatch(f"{key}: expected dim {self.dim}, got {vec.size}")
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            log.warning("%s has norm %.6g; normalizing", key, norm)
            vec = l2_normalize(vec)
        return vec

    def label_matrix(self) -> np.ndarray:
        if self._matrix is None:
            rows = []
            for label in self.label_set:
                vec = self.label_embeddings.get(label.canonical_id)
                if vec is None:
                    raise MissingLabelEmbedding(label.canonical_id)
                rows.append(vec)
            self._matrix = np.vstack(rows) if rows else np.zeros((0, self.dim))
        return self._matrix

    def dumps(self) -> str:
        def fmt(vec: np.ndarray) -> str:
            return ",".join(repr(float(v)) for v in vec)

        lines = [f"{MAGIC} {VERSION} {self.dim}"]
        for qid, vec in self.image_embeddings.items():
            lines.append(f"I\t{qid}\t{fmt(vec)}")
        for label in self.label_set:
            cid = label.canonical_id
            lines.append(f"L\t{cid}\t{self.label_prompts[cid]}\t{fmt(self.label_embeddings[cid])}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.dumps())


def _parse_vector(text: str, where: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise SchemaError(f"{where}: unparseable vector") from exc


def load_paired_embeddings(path: str | Path) -> PairedEmbeddingSet:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != MAGIC or header[1] != VERSION:
        raise SchemaError(f"{path}: bad header {lines[0]!r}")
    try:
        dim = int(header[2])
    except ValueError as exc:
        raise SchemaError(f"{path}: bad dim") from exc
    if dim <= 0:
        raise SchemaError(f"{path}: bad dim {dim}")
    pairs = PairedEmbeddingSet(dim)
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        where = f"{path}:{n}"
        if parts[0] == "I" and len(parts) == 3:
            pairs.add_image(parts[1], _parse_vector(parts[2], where))
        elif parts[0] == "L" and len(parts) == 4:
            label = label_from_canonical_id(parts[1])
            if label in pairs.label_set:
                raise SchemaError(f"{where}: duplicate label {parts[1]}")
            pairs.add_label(label, _parse_vector(parts[3], where), parts[2])
        else:
            raise SchemaError(f"{where}: unrecognized line")
    return pairs


def baseline_classify(
    pairs: PairedEmbeddingSet, query_id: str, label_set: LabelSet | None = None
) -> Prediction:
    """Arg-max cosine similarity over labels; ties go to the earlier label."""
    try:
        image = pairs.image_embeddings[query_id]
    except KeyError:
        raise UnknownQueryId(query_id) from None
    labels = label_set if label_set is not None else pairs.label_set
    if label_set is None:
        matrix = pairs.label_matrix()
    else:
        missing = [l.canonical_id for l in labels if l.canonical_id not in pairs.label_embeddings]
        if missing:
            raise MissingLabelEmbedding(", ".join(missing))
        matrix = np.vstack([pairs.label_embeddings[l.canonical_id] for l in labels])
    if len(labels) == 0:
        raise MissingLabelEmbedding("label set is empty")
    scores = matrix @ image
    best = int(np.argmax(scores))
    return Prediction(labels.labels[best], "argmax", "", query_id=query_id)


def baseline_classify_all(
    pairs: PairedEmbeddingSet, label_set: LabelSet | None = None
) -> list[Prediction]:
    return [baseline_classify(pairs, qid, label_set) for qid in pairs.image_embeddings]
