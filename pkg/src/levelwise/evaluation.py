"""Ranking-based scoring: R-Precision per level, micro (flat), macro.

R-Precision for one document is Precision@R with R = |gold|: rank labels
by descending score (ties broken by ascending label id) and count how
many of the top R are gold. Level values average over the documents that
have at least one gold label at that level; micro ranks the full label
space per document with R = the document's total gold count; macro is
the unweighted mean of the level values that are present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import pad_batch
from .exits import predict

PREDICTIONS_HEADER = "#predictions-v1\tdoc\tlabel\tscore"


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    """Per-level score vectors for one document, in canonical label order."""

    doc_id: str
    level_scores: tuple  # one 1-D float array per level


def r_precision(scores, gold, order):
    """Precision@R over labels `order` aligned with `scores`; R = |gold|."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(order)
    if scores.ndim != 1 or scores.shape[0] != labels.shape[0]:
        raise EvaluationError(
            f"{scores.shape} scores for {labels.shape[0]} labels"
        )
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("scores must be finite")
    gold = set(gold)
    if not gold:
        raise EvaluationError("empty gold set (callers skip such documents)")
    if not gold.issubset(labels.tolist()):
        raise EvaluationError("gold labels outside the score vector's space")
    ranked = np.lexsort((labels, -scores))
    top = labels[ranked[: len(gold)]]
    hits = sum(1 for label in top if label in gold)
    return hits / len(gold)


@dataclass(frozen=True)
class EvalReport:
    """Per-level values (None where no document was evaluable)."""

    level_values: tuple
    level_counts: tuple
    micro: object
    macro: object
    documents: int

    @property
    def depth(self):
        return len(self.level_values)


def _gold_at_level(document, index, n):
    order = index.level_orders[n - 1]
    target = document.level_targets[n - 1]
    return {order[i] for i in np.flatnonzero(target == 1.0)}


def per_level_eval(records, documents, index):
    """Score predictions against prepared documents (ancestor-closed)."""
    by_id = {}
    for record in records:
        if record.doc_id in by_id:
            raise EvaluationError(f"duplicate prediction for {record.doc_id}")
        by_id[record.doc_id] = record
    depth = index.depth
    level_sums = [0.0] * depth
    level_counts = [0] * depth
    micro_sum = 0.0
    micro_count = 0
    for doc in documents:
        record = by_id.get(doc.doc_id)
        if record is None:
            raise EvaluationError(f"no prediction for document {doc.doc_id}")
        if doc.level_targets is None:
            raise EvaluationError(f"document {doc.doc_id} is not prepared")
        if len(record.level_scores) != depth:
            raise EvaluationError(
                f"{len(record.level_scores)} score vectors for depth {depth}"
            )
        flat_gold = set()
        for n in range(1, depth + 1):
            scores = record.level_scores[n - 1]
            if np.asarray(scores).shape[-1] != index.size(n):
                raise EvaluationError(
                    f"level {n} scores have {np.asarray(scores).shape[-1]} "
                    f"labels, expected {index.size(n)}"
                )
            gold = _gold_at_level(doc, index, n)
            flat_gold |= gold
            if gold:
                value = r_precision(scores, gold, index.level_orders[n - 1])
                level_sums[n - 1] += value
                level_counts[n - 1] += 1
        if flat_gold:
            flat_scores = np.concatenate(
                [np.asarray(s, dtype=np.float64) for s in record.level_scores]
            )
            micro_sum += r_precision(flat_scores, flat_gold, index.global_order)
            micro_count += 1
    level_values = tuple(
        level_sums[i] / level_counts[i] if level_counts[i] else None
        for i in range(depth)
    )
    present = [v for v in level_values if v is not None]
    return EvalReport(
        level_values=level_values,
        level_counts=tuple(level_counts),
        micro=micro_sum / micro_count if micro_count else None,
        macro=sum(present) / len(present) if present else None,
        documents=len(documents),
    )


def score_documents(
    encoder, heads, wiring, documents, index, batch_size=8, pad_id=0
):
    """Run the model over prepared documents into PredictionRecords."""
    records = []
    for start in range(0, len(documents), batch_size):
        batch = documents[start : start + batch_size]
        for doc in batch:
            if doc.token_ids is None:
                raise EvaluationError(f"document {doc.doc_id} is not prepared")
        ids, mask = pad_batch([doc.token_ids for doc in batch], pad_id)
        activation = encoder.encode(ids, mask)
        outputs = predict(activation, heads, wiring)
        if wiring.is_flat:
            flat = outputs[0].data
            level_arrays = [
                flat[:, index.offsets[n - 1] : index.offsets[n - 1] + index.size(n)]
                for n in range(1, index.depth + 1)
            ]
        else:
            level_arrays = [out.data for out in outputs]
        for row, doc in enumerate(batch):
            records.append(
                PredictionRecord(
                    doc_id=doc.doc_id,
                    level_scores=tuple(
                        arr[row].copy() for arr in level_arrays
                    ),
                )
            )
    return records


@dataclass(frozen=True)
class AggregateCell:
    mean: float
    std: float  # population standard deviation


def aggregate_runs(reports):
    """Mean and population std for every cell across runs."""
    if not reports:
        raise EvaluationError("no reports to aggregate")
    depth = reports[0].depth
    for report in reports:
        if report.depth != depth:
            raise EvaluationError("reports have different depths")
    cells = {}
    columns = [(f"level{n}", n - 1) for n in range(1, depth + 1)]
    for name, i in columns:
        values = [r.level_values[i] for r in reports]
        cells[name] = _aggregate_cell(name, values)
    cells["micro"] = _aggregate_cell("micro", [r.micro for r in reports])
    cells["macro"] = _aggregate_cell("macro", [r.macro for r in reports])
    return cells


def _aggregate_cell(name, values):
    present = [v for v in values if v is not None]
    if not present:
        return None
    if len(present) != len(values):
        raise EvaluationError(f"cell {name} is absent in some reports")
    arr = np.asarray(present, dtype=np.float64)
    if np.all(arr == arr[0]):  # identical runs aggregate without drift
        return AggregateCell(mean=float(arr[0]), std=0.0)
    return AggregateCell(mean=float(arr.mean()), std=float(arr.std(ddof=0)))


def _format_value(value):
    return "n/a" if value is None else f"{value:.4f}"


def report_text(report):
    """Tabular text: one row per level, then micro and macro."""
    lines = ["metric\tvalue\tdocuments"]
    for n in range(1, report.depth + 1):
        lines.append(
            f"level-{n}\t{_format_value(report.level_values[n - 1])}"
            f"\t{report.level_counts[n - 1]}"
        )
    lines.append(f"micro\t{_format_value(report.micro)}\t{report.documents}")
    lines.append(f"macro\t{_format_value(report.macro)}\t-")
    return "\n".join(lines) + "\n"


def aggregate_text(cells, depth):
    """Tabular text for aggregated runs: mean ± population std."""
    lines = ["metric\tmean\tstd"]
    names = [f"level{n}" for n in range(1, depth + 1)] + ["micro", "macro"]
    for name in names:
        cell = cells.get(name)
        if cell is None:
            lines.append(f"{name}\tn/a\tn/a")
        else:
            lines.append(f"{name}\t{cell.mean:.4f}\t{cell.std:.4f}")
    return "\n".join(lines) + "\n"


def save_predictions(records, index, path):
    """Line-delimited (doc, label, score); floats via repr (round-trip exact)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(PREDICTIONS_HEADER + "\n")
        for record in records:
            if len(record.level_scores) != index.depth:
                raise EvaluationError(
                    f"record {record.doc_id} has {len(record.level_scores)} "
                    f"levels, index has {index.depth}"
                )
            for n in range(1, index.depth + 1):
                order = index.level_orders[n - 1]
                scores = np.asarray(record.level_scores[n - 1], np.float64)
                if scores.shape != (len(order),):
                    raise EvaluationError(
                        f"record {record.doc_id} level {n}: "
                        f"{scores.shape} scores for {len(order)} labels"
                    )
                for label, score in zip(order, scores):
                    fh.write(f"{record.doc_id}\t{label}\t{float(score)!r}\n")


def load_predictions(path, index):
    """Rebuild PredictionRecords; every document must cover every label."""
    path = Path(path)
    per_doc = {}
    doc_order = []
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != PREDICTIONS_HEADER:
            raise EvaluationError(f"{path}: unrecognized header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise EvaluationError(f"{path}:{lineno}: expected 3 fields")
            doc_id, label, score_text = fields
            try:
                score = float(score_text)
            except ValueError:
                raise EvaluationError(
                    f"{path}:{lineno}: bad score {score_text!r}"
                ) from None
            if doc_id not in per_doc:
                per_doc[doc_id] = {}
                doc_order.append(doc_id)
            if label in per_doc[doc_id]:
                raise EvaluationError(
                    f"{path}:{lineno}: duplicate score for {doc_id}/{label}"
                )
            per_doc[doc_id][label] = score
    records = []
    for doc_id in doc_order:
        scores = per_doc[doc_id]
        level_scores = []
        for n in range(1, index.depth + 1):
            order = index.level_orders[n - 1]
            try:
                level_scores.append(
                    np.array([scores.pop(label) for label in order])
                )
            except KeyError as exc:
                raise EvaluationError(
                    f"{path}: document {doc_id} is missing label {exc}"
                ) from None
        if scores:
            unknown = ", ".join(sorted(scores))
            raise EvaluationError(
                f"{path}: document {doc_id} has unknown labels: {unknown}"
            )
        records.append(
            PredictionRecord(doc_id=doc_id, level_scores=tuple(level_scores))
        )
    return records


def assert_report_invariants(report, tolerance=1e-12):
    """Internal consistency: macro is the mean of present level values."""
    present = [v for v in report.level_values if v is not None]
    for value in present + (
        [report.micro] if report.micro is not None else []
    ):
        if not (0.0 <= value <= 1.0):
            raise EvaluationError(f"value {value} outside [0, 1]")
    if present:
        expected = sum(present) / len(present)
        if not math.isclose(
            report.macro, expected, rel_tol=0.0, abs_tol=tolerance
        ):
            raise EvaluationError(
                f"macro {report.macro} != mean of levels {expected}"
            )
    elif report.macro is not None:
        raise EvaluationError("macro present without any level values")
    return report
