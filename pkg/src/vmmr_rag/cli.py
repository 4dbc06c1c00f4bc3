"""Command-line entry point: ``vmmr-rag <subcommand>``.

Exit codes: 0 success, 2 user or validation error, 3 backend or transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .baseline import baseline_classify_all, load_paired_embeddings
from .domain import (
    Description,
    LabelSet,
    QueryInput,
    VehicleLabel,
    load_label_file,
    load_queries,
    load_truths,
)
from .embed import EmbeddingBackendConfig
from .errors import BackendError, ConfigError, StageError, ValidationError, VmmrError
from .evaluation import compute_report, emit_all, sweep_csv, sweep_k, sweep_table
from .fixtures import description_file_name
from .fsutil import atomic_write_text
from .index import VectorIndex
from .kb import KnowledgeBase, kb_build_index
from .modelclients import ChatBackendConfig, make_chat_client
from .pipeline import (
    PipelineConfig,
    Prediction,
    QueryFailure,
    Recognizer,
    read_run_log,
    write_run_log,
)

log = logging.getLogger("vmmr_rag")

# Read from the working directory when --config is not given.
DEFAULT_CONFIG = "vmmr.json"

EXIT_OK, EXIT_USAGE, EXIT_BACKEND = 0, 2, 3
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".webp", ".bmp")


@dataclass
class AppConfig:
    embed_backend: EmbeddingBackendConfig = field(default_factory=EmbeddingBackendConfig)
    describer: dict[str, Any] = field(default_factory=lambda: {"kind": "fixture"})
    reasoner: dict[str, Any] = field(default_factory=lambda: {"kind": "fixture"})
    kb_path: Path = Path("vmmr.kb.jsonl")
    index_path: Path = Path("vmmr.idx")
    fixtures_dir: Path | None = None
    default_k: int = 5
    determinism_mode: bool = False
    report_dir: Path = Path("reports")
    max_parallel_queries: int = 2
    chat_max_in_flight: int = 4
    embed_with_label: bool = False
    labels_only_context: bool = False

    @classmethod
    def load(cls, path: Path | None) -> AppConfig:
        if path is None:
            if not Path(DEFAULT_CONFIG).is_file():
                return cls()
            path = Path(DEFAULT_CONFIG)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base = path.parent
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        cfg = cls()
        for key, value in data.items():
            if key == "embed_backend":
                value = EmbeddingBackendConfig.from_dict(value)
            elif key in ("describer", "reasoner"):
                value = dict(value)
                if value.get("fixture_dir"):
                    value["fixture_dir"] = str(base / value["fixture_dir"])
            elif key in ("kb_path", "index_path", "fixtures_dir", "report_dir") and value is not None:
                value = base / value
            setattr(cfg, key, value)
        if cfg.default_k < 1:
            raise ConfigError("default_k must be >= 1")
        return cfg

    def chat(self, which: str) -> ChatBackendConfig:
        data = dict(getattr(self, which))
        if data.get("kind", "fixture") == "fixture":
            if self.fixtures_dir is not None:
                data["fixture_dir"] = str(self.fixtures_dir)
            if not data.get("fixture_dir"):
                raise ConfigError(f"{which} is a fixture backend but no fixtures dir is configured")
        return ChatBackendConfig.from_dict(data)

    def pipeline(self, k: int | None = None) -> PipelineConfig:
        return PipelineConfig(
            describer=self.chat("describer"),
            reasoner=self.chat("reasoner"),
            embed_backend=self.embed_backend,
            k=k or self.default_k,
            determinism_mode=self.determinism_mode,
            max_parallel_queries=self.max_parallel_queries,
            chat_max_in_flight=self.chat_max_in_flight,
            labels_only_context=self.labels_only_context,
        )


def _apply_overrides(cfg: AppConfig, args: argparse.Namespace) -> AppConfig:
    if getattr(args, "k", None) is not None:
        cfg.default_k = args.k
    if getattr(args, "determinism", False):
        cfg.determinism_mode = True
    if getattr(args, "fixtures_dir", None) is not None:
        cfg.fixtures_dir = args.fixtures_dir
    if getattr(args, "report_dir", None) is not None:
        cfg.report_dir = args.report_dir
    if getattr(args, "embed_with_label", False):
        cfg.embed_with_label = True
    if getattr(args, "labels_only_context", False):
        cfg.labels_only_context = True
    if cfg.default_k < 1:
        raise ConfigError("--k must be >= 1")
    return cfg


def _load_kb(cfg: AppConfig, *, must_exist: bool = True) -> KnowledgeBase:
    if not cfg.kb_path.exists():
        if must_exist:
            raise ValidationError(f"knowledge base {cfg.kb_path} does not exist")
        return KnowledgeBase()
    return KnowledgeBase.load(cfg.kb_path)


def _load_index(cfg: AppConfig, kb: KnowledgeBase) -> VectorIndex:
    """Load the saved index, rebuilding in memory when it is missing or stale."""
    if cfg.index_path.exists():
        index = VectorIndex.load(cfg.index_path)
        if index.ids == [r.record_id for r in kb] and index.dim == cfg.embed_backend.dim:
            return index
        log.warning("index %s is stale for %s; rebuilding in memory", cfg.index_path, cfg.kb_path)
    return kb_build_index(kb, cfg.embed_backend, embed_with_label=cfg.embed_with_label)


def _gather_queries(args: argparse.Namespace) -> list[QueryInput]:
    queries: list[QueryInput] = []
    for path in args.queries or []:
        if not path.is_file():
            raise ValidationError(f"cannot read query file {path}")
        queries += load_queries(path)
    for path in args.image or []:
        if not path.is_file():
            raise ValidationError(f"cannot read image {path}")
        queries.append(QueryInput(path.stem, image=str(path)))
    for qid in args.query_id or []:
        queries.append(QueryInput(qid, image=qid))
    if not queries:
        raise ValidationError("no queries given (use --queries, --image or --query-id)")
    return queries


def _gather_truths(args: argparse.Namespace, queries: Sequence[QueryInput] = ()) -> dict[str, VehicleLabel]:
    truths = {q.id: q.true_label for q in queries if q.true_label is not None}
    if getattr(args, "truths", None) is not None:
        if not args.truths.is_file():
            raise ValidationError(f"cannot read truths file {args.truths}")
        truths.update(load_truths(args.truths))
    return truths


def _print_result(result: Prediction | QueryFailure) -> None:
    if isinstance(result, QueryFailure):
        print(f"{result.query_id}\tERROR\t{result.stage}: {result.error_type}: {result.message}")
    else:
        label = "ABSTAIN" if result.label is None else result.label.display
        print(f"{result.query_id}\t{label}\t{result.match_rule}")


def _label_order(kb: KnowledgeBase, truths: dict[str, VehicleLabel]) -> LabelSet:
    labels = kb.label_set
    for truth in truths.values():
        if truth not in labels:
            labels = labels.with_label(truth)
    return labels


# Subcommands

def cmd_ingest(cfg: AppConfig, args: argparse.Namespace) -> int:
    labels = load_label_file(args.labels)
    kb = _load_kb(cfg, must_exist=False)
    if args.descriptions_dir is None and args.images_dir is None:
        raise ValidationError("give --descriptions-dir or --images-dir")
    pending: list[tuple[VehicleLabel, Description]] = []
    if args.descriptions_dir is not None:
        for label in labels:
            path = args.descriptions_dir / description_file_name(label)
            if not path.is_file():
                raise ValidationError(f"missing description file for {label.display}: {path}")
            text = path.read_text(encoding="utf-8").strip()
            if not text:
                raise ValidationError(f"description file for {label.display} is empty: {path}")
            pending.append((label, Description(text, "fixture")))
    else:
        describer = make_chat_client(cfg.chat("describer"))
        template = cfg.pipeline().describer_template
        for label in labels:
            stem = description_file_name(label)[: -len(".txt")]
            found = [args.images_dir / f"{stem}{ext}" for ext in IMAGE_SUFFIXES]
            image = next((p for p in found if p.is_file()), None)
            if image is None:
                raise ValidationError(f"missing training image for {label.display} in {args.images_dir}")
            pending.append((label, describer.describe(QueryInput(stem, image=str(image)), template)))
    for label, desc in pending:
        print(kb.ingest(label, desc))
    kb.save(cfg.kb_path)
    return EXIT_OK


def cmd_index(cfg: AppConfig, args: argparse.Namespace) -> int:
    kb = _load_kb(cfg)
    if len(kb) == 0:
        raise ValidationError("empty knowledge base")
    index = kb_build_index(kb, cfg.embed_backend, embed_with_label=cfg.embed_with_label)
    index.save(cfg.index_path)
    print(f"dim={index.dim} count={len(index)} path={cfg.index_path}")
    return EXIT_OK


def _recognizer(cfg: AppConfig, k: int | None = None) -> Recognizer:
    kb = _load_kb(cfg)
    index = _load_index(cfg, kb)
    return Recognizer(cfg.pipeline(k), kb, index)


def cmd_recognize(cfg: AppConfig, args: argparse.Namespace) -> int:
    queries = _gather_queries(args)
    truths = _gather_truths(args, queries)
    rec = _recognizer(cfg)
    results = rec.recognize_batch(queries)
    for result in results:
        _print_result(result)
    run_log = args.run_log or cfg.report_dir / "run_log.jsonl"
    write_run_log(run_log, results, truths, include_timings=not args.no_timestamps)
    log.info("run log written to %s", run_log)
    return EXIT_OK


def cmd_evaluate(cfg: AppConfig, args: argparse.Namespace) -> int:
    if args.run_log is not None:
        if not args.run_log.is_file():
            raise ValidationError(f"cannot read run log {args.run_log}")
        results, logged = read_run_log(args.run_log)
        truths = {**logged, **_gather_truths(args)}
        kb = _load_kb(cfg, must_exist=False)
    else:
        queries = _gather_queries(args)
        truths = _gather_truths(args, queries)
        rec = _recognizer(cfg)
        kb = rec.kb
        results = rec.recognize_batch(queries)
        write_run_log(cfg.report_dir / "run_log.jsonl", results, truths,
                      include_timings=not args.no_timestamps)
    k = next((r.k for r in results if isinstance(r, Prediction) and r.k), cfg.default_k)
    report = compute_report(results, truths, k=k, label_set=_label_order(kb, truths))
    for path in emit_all(report, cfg.report_dir, method=args.method, timestamps=not args.no_timestamps):
        print(path)
    print(f"accuracy={report.accuracy:.4f} recall={report.macro_recall:.4f} "
          f"precision={report.macro_precision:.4f} n={report.n_queries}")
    return EXIT_OK


def cmd_sweep_k(cfg: AppConfig, args: argparse.Namespace) -> int:
    try:
        ks = [int(x) for x in args.k_values.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"bad --k-values {args.k_values!r}") from None
    if not ks or min(ks) < 1:
        raise ValidationError("--k-values must be positive integers")
    queries = _gather_queries(args)
    truths = _gather_truths(args, queries)
    rec = _recognizer(cfg)
    n = len(rec.index)
    clamped = sorted({min(k, n) for k in ks})
    if clamped != sorted(set(ks)):
        log.warning("k values above the knowledge-base size (%d) were clamped", n)
    rows = sweep_k(rec, queries, truths, clamped, label_set=_label_order(rec.kb, truths))
    table = sweep_table(rows, args.baseline_accuracy)
    print(table)
    atomic_write_text(cfg.report_dir / "sweep.txt", table + "\n")
    atomic_write_text(cfg.report_dir / "sweep.csv", sweep_csv(rows, args.baseline_accuracy))
    for row in rows:
        write_run_log(cfg.report_dir / f"run_log_k{row.k}.jsonl", row.results, truths,
                      include_timings=not args.no_timestamps)
    return EXIT_OK


def cmd_baseline(cfg: AppConfig, args: argparse.Namespace) -> int:
    if not args.pairs.is_file():
        raise ValidationError(f"cannot read paired-embedding file {args.pairs}")
    pairs = load_paired_embeddings(args.pairs)
    labels = load_label_file(args.labels) if args.labels is not None else None
    predictions = baseline_classify_all(pairs, labels)
    truths = _gather_truths(args)
    order = labels if labels is not None else pairs.label_set
    report = compute_report(predictions, truths, label_set=order)
    out = args.out_dir or cfg.report_dir / "baseline"
    for path in emit_all(report, out, method=args.method, timestamps=not args.no_timestamps):
        print(path)
    print(f"accuracy={report.accuracy:.4f} recall={report.macro_recall:.4f} "
          f"precision={report.macro_precision:.4f} n={report.n_queries}")
    return EXIT_OK


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # Subparsers get SUPPRESS defaults so flags given before the subcommand survive.
    def default(value: Any) -> dict[str, Any]:
        return {"default": argparse.SUPPRESS if suppress else value}

    parser.add_argument(
        "--config", type=Path, help=f"JSON config (default: ./{DEFAULT_CONFIG} if present)", **default(None)
    )
    parser.add_argument("--k", type=int, **default(None))
    parser.add_argument("--determinism", action="store_true", **default(False))
    parser.add_argument("--fixtures-dir", type=Path, **default(None))
    parser.add_argument("--report-dir", type=Path, **default(None))
    parser.add_argument("--no-timestamps", action="store_true", **default(False))
    parser.add_argument("--embed-with-label", action="store_true", **default(False),
                        help="embed label text with each description (leaky ablation)")
    parser.add_argument("--labels-only-context", action="store_true", **default(False),
                        help="show the reasoner candidate labels without their descriptions")
    parser.add_argument("-v", "--verbose", action="count", **default(0))


def _query_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--queries", type=Path, action="append", help="JSON-lines query file")
    parser.add_argument("--image", type=Path, action="append", help="image file; query id is the file stem")
    parser.add_argument("--query-id", action="append", help="fixture query id")
    parser.add_argument("--truths", type=Path, help="query_id<TAB>make<TAB>model file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vmmr-rag", description="Retrieval-augmented vehicle make/model recognition")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="add labeled descriptions to the knowledge base")
    p.add_argument("--labels", type=Path, required=True, help="make<TAB>model label file")
    p.add_argument("--descriptions-dir", type=Path, help="one <make>__<model>.txt per label")
    p.add_argument("--images-dir", type=Path, help="one training image per label, described by the describer")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", parents=[common], help="embed the knowledge base and save the index")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("recognize", parents=[common], help="run the pipeline on queries")
    _query_flags(p)
    p.add_argument("--run-log", type=Path)
    p.set_defaults(func=cmd_recognize)

    p = sub.add_parser("evaluate", parents=[common], help="score a run log or live queries")
    _query_flags(p)
    p.add_argument("--run-log", type=Path)
    p.add_argument("--method", default="RAG-based LLM")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-k", parents=[common], help="accuracy for several retrieval depths")
    _query_flags(p)
    p.add_argument("--k-values", default="1,3,5,7")
    p.add_argument("--baseline-accuracy", type=float)
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("baseline", parents=[common], help="similarity arg-max baseline from paired embeddings")
    p.add_argument("--pairs", type=Path, required=True)
    p.add_argument("--truths", type=Path, required=True)
    p.add_argument("--labels", type=Path, help="label file fixing label order")
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--method", default="CLIP Model")
    p.set_defaults(func=cmd_baseline)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, BackendError):
        return EXIT_BACKEND
    return EXIT_USAGE


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = _apply_overrides(AppConfig.load(args.config), args)
        return args.func(cfg, args)
    except VmmrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
