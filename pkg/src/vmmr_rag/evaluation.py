"""Classification metrics, confusion matrices, rank distributions and the k sweep.

Overall numbers follow the three-column reference layout: "Accuracy" is
micro accuracy, "Recall" and "Precision" are unweighted means over classes
that have at least one test query. Metrics are accumulated as exact
fractions, so with balanced classes macro recall equals accuracy bit for bit.
"""

from __future__ import annotations

import csv
import io
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from datetime import datetime, timezone
from fractions import Fraction
from html import escape
from pathlib import Path
from typing import Literal

import numpy as np

from .domain import LabelSet, Prediction, QueryInput, VehicleLabel
from .errors import EmptyPredictionList, InvalidInput, MissingTruth
from .fsutil import atomic_write_text
from .kb import label_of_record_id
from .pipeline import QueryFailure, Recognizer

log = logging.getLogger(__name__)

ABSTAIN = "abstain"
MISS = "miss"
FOOTNOTE = (
    "Accuracy = micro accuracy; Recall and Precision = unweighted means over classes "
    "with test queries. Precision of a never-predicted class is 0. "
    "Abstentions count as errors."
)

ReportFormat = Literal["table-text", "csv", "svg-heatmap"]


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true labels, columns are predicted labels plus a final abstain column."""

    labels: LabelSet
    counts: np.ndarray

    @property
    def column_ids(self) -> list[str]:
        return self.labels.ids + [ABSTAIN]

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def trace(self) -> int:
        return int(np.trace(self.counts[:, : len(self.labels)]))


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    recall: float
    precision: float
    support: int
    predicted: int


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    macro_recall: float
    macro_precision: float
    per_class: dict[str, ClassMetrics]
    confusion: ConfusionMatrix
    rank_distribution: dict[int | str, int]
    n_queries: int
    abstentions: int
    k: int | None = None

    def overall_row(self) -> tuple[float, float, float]:
        return self.accuracy, self.macro_recall, self.macro_precision


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def _truth_rank(pred: Prediction | QueryFailure, truth: VehicleLabel) -> int | None:
    if isinstance(pred, QueryFailure):
        return None
    for hit in pred.hits:
        if label_of_record_id(hit.record_id) == truth.canonical_id:
            return hit.rank
    return None


def compute_report(
    predictions: Sequence[Prediction | QueryFailure],
    truths: Mapping[str, VehicleLabel],
    k: int | None = None,
    label_set: LabelSet | None = None,
) -> EvalReport:
    """Score predictions against truths.

    ``label_set`` fixes the row/column order; by default it is every true or
    predicted label, sorted by canonical id. Failed queries count as abstentions.
    """
    if not predictions:
        raise EmptyPredictionList("no predictions to evaluate")
    for p in predictions:
        if p.query_id not in truths:
            raise MissingTruth(f"no true label for query {p.query_id!r}")

    def predicted(p: Prediction | QueryFailure) -> VehicleLabel | None:
        return p.label if isinstance(p, Prediction) else None

    if label_set is None:
        seen = {t.canonical_id: t for t in truths.values() if t is not None}
        for p in predictions:
            lab = predicted(p)
            if lab is not None:
                seen.setdefault(lab.canonical_id, lab)
        label_set = LabelSet.of(seen[c] for c in sorted(seen))
    K = len(label_set)
    counts = np.zeros((K, K + 1), dtype=np.int64)
    for p in predictions:
        truth = truths[p.query_id]
        if truth not in label_set:
            raise InvalidInput(f"true label {truth} of {p.query_id!r} is outside the label set")
        lab = predicted(p)
        if lab is not None and lab not in label_set:
            raise InvalidInput(f"predicted label {lab} of {p.query_id!r} is outside the label set")
        col = K if lab is None else label_set.index_of(lab)
        counts[label_set.index_of(truth), col] += 1
    confusion = ConfusionMatrix(label_set, counts)

    n = len(predictions)
    per_class: dict[str, ClassMetrics] = {}
    recalls: list[Fraction] = []
    precisions: list[Fraction] = []
    for i, label in enumerate(label_set):
        tp = int(counts[i, i])
        support = int(counts[i].sum())
        n_pred = int(counts[:, i].sum())
        recall = _ratio(tp, support)
        precision = _ratio(tp, n_pred)
        per_class[label.canonical_id] = ClassMetrics(
            float(recall), float(recall), float(precision), support, n_pred
        )
        if support:
            recalls.append(recall)
            precisions.append(precision)

    accuracy = Fraction(confusion.trace(), n)
    macro_recall = sum(recalls, Fraction(0)) / len(recalls)
    macro_precision = sum(precisions, Fraction(0)) / len(precisions)

    depth = k if k is not None else max(
        (len(p.hits) for p in predictions if isinstance(p, Prediction)), default=0
    )
    ranks: dict[int | str, int] = {r: 0 for r in range(1, depth + 1)}
    ranks[MISS] = 0
    for p in predictions:
        r = _truth_rank(p, truths[p.query_id])
        key: int | str = MISS if r is None else r
        ranks[key] = ranks.get(key, 0) + 1
    ranks = {key: ranks[key] for key in sorted(x for x in ranks if x != MISS) + [MISS]}

    return EvalReport(
        accuracy=float(accuracy),
        macro_recall=float(macro_recall),
        macro_precision=float(macro_precision),
        per_class=per_class,
        confusion=confusion,
        rank_distribution=ranks,
        n_queries=n,
        abstentions=int(counts[:, K].sum()),
        k=k,
    )


@dataclass(frozen=True)
class SweepRow:
    k: int
    report: EvalReport
    results: list[Prediction | QueryFailure]


def sweep_k(
    recognizer: Recognizer,
    inputs: Sequence[QueryInput],
    truths: Mapping[str, VehicleLabel],
    k_values: Iterable[int],
    label_set: LabelSet | None = None,
) -> list[SweepRow]:
    """Evaluate the pipeline once per k, ascending.

    Descriptions and query embeddings are computed once and shared by every k;
    only retrieval, prompting, reasoning and parsing are repeated.
    """
    ks = sorted(set(k_values))
    if not ks or ks[0] < 1:
        raise InvalidInput("k_values must be non-empty positive integers")
    n_records = len(recognizer.index)
    if ks[-1] > n_records:
        log.warning("k=%d exceeds the %d indexed records; retrieval is capped", ks[-1], n_records)
    if label_set is None:
        label_set = recognizer.label_set
    prepared = recognizer.prepare_batch(inputs)
    rows = []
    for k in ks:
        results = recognizer.finish_batch(prepared, k)
        labels = _covering(label_set, truths.values())
        rows.append(SweepRow(k, compute_report(results, truths, k=k, label_set=labels), results))
    return rows


def _covering(label_set: LabelSet, extra: Iterable[VehicleLabel]) -> LabelSet:
    out = label_set
    for label in extra:
        if label not in out:
            out = out.with_label(label)
    return out


# Rendering

def _fmt(x: float, places: int = 4) -> str:
    return f"{x:.{places}f}"


def _rank_key(key: int | str) -> str:
    return str(key)


def _csv_text(rows: Sequence[Sequence[object]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def confusion_csv(report: EvalReport) -> str:
    cm = report.confusion
    rows: list[list[object]] = [["true\\predicted"] + cm.column_ids]
    for label, row in zip(cm.labels, cm.counts):
        rows.append([label.canonical_id] + [int(v) for v in row])
    return _csv_text(rows)


def per_class_csv(report: EvalReport) -> str:
    rows: list[list[object]] = [["class", "accuracy", "recall", "precision", "support", "predicted"]]
    for cid, m in report.per_class.items():
        rows.append([cid, _fmt(m.accuracy), _fmt(m.recall), _fmt(m.precision), m.support, m.predicted])
    return _csv_text(rows)


def rank_csv(report: EvalReport) -> str:
    rows: list[list[object]] = [["rank", "count"]]
    rows += [[_rank_key(key), count] for key, count in report.rank_distribution.items()]
    return _csv_text(rows)


def overall_csv(report: EvalReport, method: str = "RAG") -> str:
    return _csv_text([
        ["model", "accuracy", "recall", "precision", "n_queries", "abstentions"],
        [method, _fmt(report.accuracy), _fmt(report.macro_recall),
         _fmt(report.macro_precision), report.n_queries, report.abstentions],
    ])


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    cells = [list(header)] + [list(r) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]

    def line(row: Sequence[str]) -> str:
        return "| " + " | ".join(c.center(w) for c, w in zip(row, widths)) + " |"

    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [rule, line(cells[0]), rule]
    for row in cells[1:]:
        out += [line(row), rule]
    return "\n".join(out)


def overall_table(reports: Sequence[tuple[str, EvalReport]]) -> str:
    """Overall metrics, one row per method: Model | Accuracy | Recall | Precision."""
    rows = [
        [name, _fmt(r.accuracy, 2), _fmt(r.macro_recall, 2), _fmt(r.macro_precision, 2)]
        for name, r in reports
    ]
    return _table(["Model", "Accuracy", "Recall", "Precision"], rows)


def per_class_table(report: EvalReport) -> str:
    rows = []
    for label in report.confusion.labels:
        m = report.per_class[label.canonical_id]
        rows.append([label.model, _fmt(m.accuracy, 2), _fmt(m.recall, 2), _fmt(m.precision, 2)])
    return _table(["Car Model", "Accuracy", "Recall", "Precision"], rows)


def rank_table(report: EvalReport) -> str:
    rows = [
        ["Miss" if key == MISS else f"Rank {key}", str(count)]
        for key, count in report.rank_distribution.items()
    ]
    return _table(["Retrieval rank of true model", "Queries"], rows)


def sweep_table(rows: Sequence[SweepRow], baseline_accuracy: float | None = None) -> str:
    """Accuracy per k, optionally preceded by a similarity-baseline row."""
    body = []
    if baseline_accuracy is not None:
        body.append(["CLIP Model", _fmt(baseline_accuracy, 2)])
    body += [[f"Top-{row.k}", _fmt(row.report.accuracy, 2)] for row in rows]
    return _table(["K-value", "Accuracy"], body)


def sweep_csv(rows: Sequence[SweepRow], baseline_accuracy: float | None = None) -> str:
    out: list[list[object]] = [["k", "accuracy", "macro_recall", "macro_precision", "abstentions"]]
    if baseline_accuracy is not None:
        out.append(["baseline", _fmt(baseline_accuracy), "", "", ""])
    for row in rows:
        r = row.report
        out.append([row.k, _fmt(r.accuracy), _fmt(r.macro_recall), _fmt(r.macro_precision), r.abstentions])
    return _csv_text(out)


def text_report(report: EvalReport, method: str = "RAG", timestamp: datetime | None = None) -> str:
    parts = []
    if timestamp is not None:
        parts.append(f"generated_at: {timestamp.isoformat()}")
    parts += [
        f"queries: {report.n_queries}  abstentions: {report.abstentions}"
        + ("" if report.k is None else f"  k: {report.k}"),
        "",
        "Overall performance",
        overall_table([(method, report)]),
        "",
        "Per-class performance",
        per_class_table(report),
        "",
        "Retrieval rank distribution",
        rank_table(report),
        "",
        FOOTNOTE,
    ]
    return "\n".join(parts) + "\n"


def _heat(value: int, peak: int) -> str:
    t = 0.0 if peak == 0 else value / peak
    r = round(255 - t * (255 - 8))
    g = round(255 - t * (255 - 69))
    b = round(255 - t * (255 - 148))
    return f"#{r:02x}{g:02x}{b:02x}"


def confusion_svg(report: EvalReport, title: str = "Confusion matrix") -> str:
    cm = report.confusion
    rows = [label.canonical_id for label in cm.labels]
    cols = cm.column_ids
    cell, left, top = 40, 180, 180
    width = left + cell * len(cols) + 20
    height = top + cell * len(rows) + 40
    peak = int(cm.counts.max()) if cm.counts.size else 0
    out = [
        (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">'
        ),
        f'<text x="{width // 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{left + cell * len(cols) // 2}" y="36" text-anchor="middle">Predicted</text>',
        (
            f'<text x="14" y="{top + cell * len(rows) // 2}" text-anchor="middle" '
            f'transform="rotate(-90 14 {top + cell * len(rows) // 2})">True</text>'
        ),
    ]
    for j, cid in enumerate(cols):
        x = left + j * cell + cell // 2
        out.append(
            f'<text x="{x}" y="{top - 6}" transform="rotate(-60 {x} {top - 6})">{escape(cid)}</text>'
        )
    for i, cid in enumerate(rows):
        y = top + i * cell + cell // 2 + 4
        out.append(f'<text x="{left - 6}" y="{y}" text-anchor="end">{escape(cid)}</text>')
        for j in range(len(cols)):
            v = int(cm.counts[i, j])
            x0, y0 = left + j * cell, top + i * cell
            fg = "#ffffff" if peak and v / peak > 0.5 else "#000000"
            out.append(
                f'<rect x="{x0}" y="{y0}" width="{cell}" height="{cell}" '
                f'fill="{_heat(v, peak)}" stroke="#999999"/>'
            )
            out.append(
                f'<text x="{x0 + cell // 2}" y="{y0 + cell // 2 + 4}" '
                f'text-anchor="middle" fill="{fg}">{v}</text>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(
    report: EvalReport,
    fmt: ReportFormat,
    out_dir: str | Path,
    *,
    method: str = "RAG",
    timestamps: bool = True,
) -> list[Path]:
    """Write one report format into ``out_dir`` and return the files written."""
    out_dir = Path(out_dir)
    written: list[Path] = []

    def put(name: str, text: str) -> None:
        path = out_dir / name
        atomic_write_text(path, text)
        written.append(path)

    if fmt == "csv":
        put("overall.csv", overall_csv(report, method))
        put("confusion.csv", confusion_csv(report))
        put("per_class.csv", per_class_csv(report))
        put("rank_distribution.csv", rank_csv(report))
    elif fmt == "table-text":
        ts = datetime.now(timezone.utc).replace(microsecond=0) if timestamps else None
        put("report.txt", text_report(report, method, ts))
    elif fmt == "svg-heatmap":
        put("confusion.svg", confusion_svg(report, f"Confusion matrix: {method}"))
    else:
        raise InvalidInput(f"unknown report format {fmt!r}")
    return written


def emit_all(
    report: EvalReport, out_dir: str | Path, *, method: str = "RAG", timestamps: bool = True
) -> list[Path]:
    paths: list[Path] = []
    for fmt in ("table-text", "csv", "svg-heatmap"):
        paths += emit_report(report, fmt, out_dir, method=method, timestamps=timestamps)
    return paths
