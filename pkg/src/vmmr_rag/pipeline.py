"""Per-query orchestration: describe, embed, retrieve, prompt, reason, parse."""

from __future__ import annotations

import json
import logging
import threading
import time
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .domain import Description, Prediction, QueryInput, VehicleLabel
from .embed import Embedder, EmbeddingBackendConfig, make_embedder
from .errors import BatchEmpty, ConfigError, DimensionMismatch, SchemaError, StageError
from .fsutil import atomic_write_text
from .index import RetrievalHit, VectorIndex
from .kb import KnowledgeBase
from .modelclients import (
    DEFAULT_DESCRIBER_TEMPLATE,
    DEFAULT_REASONER_TEMPLATE,
    ChatBackendConfig,
    ChatClient,
    PromptTemplate,
    build_prompt,
    make_chat_client,
    parse_prediction,
    prompt_hash,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    describer: ChatBackendConfig
    reasoner: ChatBackendConfig
    embed_backend: EmbeddingBackendConfig = field(default_factory=EmbeddingBackendConfig)
    k: int = 5
    describer_template: PromptTemplate = DEFAULT_DESCRIBER_TEMPLATE
    reasoner_template: PromptTemplate = DEFAULT_REASONER_TEMPLATE
    determinism_mode: bool = False
    max_parallel_queries: int = 2
    chat_max_in_flight: int = 4
    labels_only_context: bool = False

    def __post_init__(self) -> None:
        if self.k < 1 or self.max_parallel_queries < 1 or self.chat_max_in_flight < 1:
            raise ConfigError("k, max_parallel_queries and chat_max_in_flight must be >= 1")
        if self.determinism_mode:
            for name, cfg in (("describer", self.describer), ("reasoner", self.reasoner)):
                if cfg.temperature != 0:
                    raise ConfigError(f"determinism mode requires {name} temperature 0")


@dataclass(frozen=True)
class QueryFailure:
    """Error entry standing in for a prediction when one query fails."""

    query_id: str
    stage: str
    error_type: str
    message: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "error": {"stage": self.stage, "type": self.error_type, "message": self.message},
        }


@dataclass(frozen=True)
class PreparedQuery:
    """Output of the k-independent stages, reusable across k values."""

    query: QueryInput
    description: Description
    vector: np.ndarray
    latency_ms: dict[str, float]


class _Stage:
    def __init__(self, name: str, timings: dict[str, float]):
        self.name = name
        self.timings = timings

    def __enter__(self) -> None:
        self.t0 = time.perf_counter()

    def __exit__(self, exc_type, exc, tb) -> bool:
        self.timings[self.name] = round((time.perf_counter() - self.t0) * 1000.0, 3)
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


class Recognizer:
    """Holds the backends for one run; kb, index and config are read-only here."""

    def __init__(
        self,
        config: PipelineConfig,
        kb: KnowledgeBase,
        index: VectorIndex,
        *,
        embedder: Embedder | None = None,
        describer: ChatClient | None = None,
        reasoner: ChatClient | None = None,
    ):
        self.config = config
        self.kb = kb
        self.index = index
        slots = threading.BoundedSemaphore(config.chat_max_in_flight)
        self.embedder = embedder or make_embedder(config.embed_backend)
        self.describer = describer or make_chat_client(config.describer, slots=slots)
        self.reasoner = reasoner or make_chat_client(config.reasoner, slots=slots)
        if index.dim != self.embedder.dim:
            raise DimensionMismatch(
                f"index dim {index.dim} does not match embedding backend dim {self.embedder.dim}"
            )
        self.label_set = kb.label_set

    def prepare(self, query: QueryInput) -> PreparedQuery:
        timings: dict[str, float] = {}
        with _Stage("describe", timings):
            if query.description is not None:
                description = query.description
            else:
                description = self.describer.describe(query, self.config.describer_template)
        with _Stage("embed", timings):
            vector = self.embedder.embed_many([description.text])[0]
        return PreparedQuery(query, description, vector, timings)

    def finish(self, prepared: PreparedQuery, k: int | None = None) -> Prediction:
        k = k or self.config.k
        timings = dict(prepared.latency_ms)
        with _Stage("retrieve", timings):
            hits = self.index.search(prepared.vector, k)
        with _Stage("prompt", timings):
            prompt = build_prompt(
                prepared.description,
                hits,
                self.kb,
                self.config.reasoner_template,
                labels_only=self.config.labels_only_context,
            )
        with _Stage("reason", timings):
            raw = self.reasoner.complete(prompt)
        with _Stage("parse", timings):
            candidates = [self.kb.get(hit.record_id).label for hit in hits]
            parsed = parse_prediction(raw, candidates, self.label_set)
        return replace(
            parsed,
            query_id=prepared.query.id,
            hits=tuple(hits),
            description_used=prepared.description,
            prompt_hash=prompt_hash(prompt),
            k=k,
            latency_ms=timings,
        )

    def recognize(self, query: QueryInput, k: int | None = None) -> Prediction:
        return self.finish(self.prepare(query), k)

    def _map(self, fn, items: Sequence[Any]) -> list[Any]:
        workers = min(self.config.max_parallel_queries, len(items))
        if workers <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))

    def prepare_batch(self, queries: Sequence[QueryInput]) -> list[PreparedQuery | QueryFailure]:
        def run(query: QueryInput) -> PreparedQuery | QueryFailure:
            try:
                return self.prepare(query)
            except StageError as exc:
                return _failure(query.id, exc)

        return self._map(run, queries)

    def finish_batch(
        self, prepared: Sequence[PreparedQuery | QueryFailure], k: int | None = None
    ) -> list[Prediction | QueryFailure]:
        def run(item: PreparedQuery | QueryFailure) -> Prediction | QueryFailure:
            if isinstance(item, QueryFailure):
                return item
            try:
                return self.finish(item, k)
            except StageError as exc:
                return _failure(item.query.id, exc)

        return self._map(run, prepared)

    def recognize_batch(
        self, queries: Sequence[QueryInput], k: int | None = None
    ) -> list[Prediction | QueryFailure]:
        """Results come back in input order; a failing query yields a QueryFailure."""
        if not queries:
            raise BatchEmpty("no queries given")
        return self.finish_batch(self.prepare_batch(queries), k)


def _failure(query_id: str, exc: StageError) -> QueryFailure:
    log.warning("query %s failed in %s: %s", query_id, exc.stage, exc.cause)
    return QueryFailure(query_id, exc.stage, type(exc.cause).__name__, str(exc.cause))


def recognize(
    config: PipelineConfig, kb: KnowledgeBase, index: VectorIndex, query: QueryInput
) -> Prediction:
    return Recognizer(config, kb, index).recognize(query)


def recognize_batch(
    config: PipelineConfig,
    kb: KnowledgeBase,
    index: VectorIndex,
    queries: Sequence[QueryInput],
) -> list[Prediction | QueryFailure]:
    return Recognizer(config, kb, index).recognize_batch(queries)


# Run log: one JSON object per query, in input order.

def run_log_entry(
    result: Prediction | QueryFailure,
    true_label: VehicleLabel | None = None,
    *,
    include_timings: bool = True,
) -> dict[str, Any]:
    entry = result.to_dict()
    if isinstance(result, Prediction) and include_timings:
        entry["latency_ms"] = dict(result.latency_ms)
    entry["true_label"] = None if true_label is None else {
        "make": true_label.make, "model": true_label.model
    }
    return entry


def dumps_run_log(
    results: Iterable[Prediction | QueryFailure],
    truths: dict[str, VehicleLabel] | None = None,
    *,
    include_timings: bool = True,
) -> str:
    truths = truths or {}
    lines = [
        json.dumps(
            run_log_entry(r, truths.get(r.query_id), include_timings=include_timings),
            ensure_ascii=False,
            sort_keys=True,
        )
        for r in results
    ]
    return "".join(line + "\n" for line in lines)


def write_run_log(
    path: str | Path,
    results: Iterable[Prediction | QueryFailure],
    truths: dict[str, VehicleLabel] | None = None,
    *,
    include_timings: bool = True,
) -> None:
    atomic_write_text(path, dumps_run_log(results, truths, include_timings=include_timings))


def read_run_log(
    path: str | Path,
) -> tuple[list[Prediction | QueryFailure], dict[str, VehicleLabel]]:
    """Parse a run log back into results and the truths recorded alongside them."""
    path = Path(path)
    results: list[Prediction | QueryFailure] = []
    truths: dict[str, VehicleLabel] = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            qid = obj["query_id"]
            if obj.get("true_label"):
                truths[qid] = VehicleLabel(obj["true_label"]["make"], obj["true_label"]["model"])
            if "error" in obj:
                err = obj["error"]
                results.append(QueryFailure(qid, err["stage"], err["type"], err["message"]))
                continue
            label = None if obj["label"] is None else VehicleLabel(obj["make"], obj["model"])
            hits = tuple(
                RetrievalHit(h["record_id"], float(h["score"]), int(h["rank"])) for h in obj["hits"]
            )
            desc = obj.get("description")
            results.append(
                Prediction(
                    label=label,
                    match_rule=obj["match_rule"],
                    raw_reasoner_text=obj.get("raw_reasoner_text", ""),
                    query_id=qid,
                    hits=hits,
                    description_used=(
                        Description(desc, obj.get("description_source") or "generated")
                        if desc else None
                    ),
                    prompt_hash=obj.get("prompt_hash", ""),
                    k=obj.get("k"),
                    latency_ms=obj.get("latency_ms") or {},
                )
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise SchemaError(f"{path}:{n}: bad run log line: {exc}") from exc
    return results, truths
