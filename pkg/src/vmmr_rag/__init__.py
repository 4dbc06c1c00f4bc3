"""Zero-shot vehicle make/model recognition by retrieval over text descriptions."""

from .domain import (
    Description,
    LabelSet,
    Prediction,
    QueryInput,
    VehicleLabel,
    canonicalize_label,
)
from .embed import EmbeddingBackendConfig, cosine_similarity, embed_text
from .evaluation import EvalReport, compute_report, emit_report, sweep_k
from .index import RetrievalHit, VectorIndex
from .kb import KnowledgeBase, kb_build_index
from .modelclients import (
    ChatBackendConfig,
    PromptTemplate,
    build_prompt,
    parse_prediction,
)
from .pipeline import (
    PipelineConfig,
    QueryFailure,
    Recognizer,
    recognize,
    recognize_batch,
)

__all__ = [
    "ChatBackendConfig",
    "Description",
    "EmbeddingBackendConfig",
    "EvalReport",
    "KnowledgeBase",
    "LabelSet",
    "PipelineConfig",
    "Prediction",
    "PromptTemplate",
    "QueryFailure",
    "QueryInput",
    "Recognizer",
    "RetrievalHit",
    "VectorIndex",
    "VehicleLabel",
    "build_prompt",
    "canonicalize_label",
    "compute_report",
    "cosine_similarity",
    "embed_text",
    "emit_report",
    "kb_build_index",
    "parse_prediction",
    "recognize",
    "recognize_batch",
    "sweep_k",
]
