"""Confusion matrices, F1 metrics, multi-run averaging, and report emission.

Abstained predictions (provider failures, unparseable replies) are scored as
wrong by assigning the class farthest from the truth in severity order, and
tallied separately so they are never silently dropped.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError
from .model import CLASSES, ImpactClass


def farthest_class(truth: ImpactClass) -> ImpactClass:
    """The class most distant from truth in the MILD < MODERATE < SEVERE order.

    MODERATE is equidistant from both extremes; the tie resolves to SEVERE so
    the assignment stays deterministic.
    """
    return max(CLASSES, key=lambda c: (abs(int(c) - int(truth)), int(c)))


@dataclass
class ConfusionMatrix:
    """3x3 counts, rows = actual class, columns = predicted class."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))
    abstains: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]]) -> "ConfusionMatrix":
        counts = np.asarray(rows, dtype=np.int64)
        if counts.shape != (3, 3) or (counts < 0).any():
            raise InvalidInputError("confusion matrix must be 3x3 with non-negative counts")
        return cls(counts=counts)


def confusion_matrix(
    pairs: Iterable[Tuple[ImpactClass, Optional[ImpactClass]]],
) -> ConfusionMatrix:
    """Count (actual, predicted) pairs; predicted None marks an abstention."""
    matrix = ConfusionMatrix()
    for truth, predicted in pairs:
        if predicted is None:
            predicted = farthest_class(truth)
            matrix.abstains[int(truth)] += 1
        matrix.counts[int(truth), int(predicted)] += 1
    return matrix


@dataclass(frozen=True)
class MetricReport:
    """Per-class and aggregate F1 for one (model, horizon, run)."""

    model_id: str
    horizon_minutes: int
    run_index: int
    per_class_f1: Mapping[ImpactClass, float]
    macro_f1: float
    weighted_f1: float
    support: Mapping[ImpactClass, int]
    abstain_count: int = 0


def f1_scores(matrix: ConfusionMatrix) -> Dict[str, object]:
    """Per-class, macro, and support-weighted F1 from a confusion matrix.

    A class with zero precision+recall gets F1 = 0 and still counts in the
    macro mean.
    """
    counts = matrix.counts.astype(np.float64)
    support = matrix.row_sums().astype(np.float64)
    predicted = matrix.col_sums().astype(np.float64)
    per_class: Dict[ImpactClass, float] = {}
    for cls in CLASSES:
        i = int(cls)
        tp = counts[i, i]
        precision = tp / predicted[i] if predicted[i] > 0 else 0.0
        recall = tp / support[i] if support[i] > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class[cls] = float(f1)
    macro = float(sum(per_class.values()) / len(CLASSES))
    total = support.sum()
    weighted = (
        float(sum(support[int(c)] * per_class[c] for c in CLASSES) / total) if total > 0 else 0.0
    )
    return {
        "per_class_f1": per_class,
        "macro_f1": macro,
        "weighted_f1": weighted,
        "support": {c: int(support[int(c)]) for c in CLASSES},
    }


def metric_report(
    matrix: ConfusionMatrix, model_id: str, horizon_minutes: int, run_index: int
) -> MetricReport:
    scores = f1_scores(matrix)
    return MetricReport(
        model_id=model_id,
        horizon_minutes=horizon_minutes,
        run_index=run_index,
        per_class_f1=scores["per_class_f1"],
        macro_f1=scores["macro_f1"],
        weighted_f1=scores["weighted_f1"],
        support=scores["support"],
        abstain_count=int(matrix.abstains.sum()),
    )


def average_runs(reports: Sequence[MetricReport]) -> MetricReport:
    """Arithmetic mean of every metric across runs of one (model, horizon)."""
    if not reports:
        raise InvalidInputError("no reports to average")
    models = {r.model_id for r in reports}
    horizons = {r.horizon_minutes for r in reports}
    if len(models) != 1 or len(horizons) != 1:
        raise InvalidInputError(
            f"cannot average across models {sorted(models)} / horizons {sorted(horizons)}"
        )
    n = len(reports)
    return MetricReport(
        model_id=reports[0].model_id,
        horizon_minutes=reports[0].horizon_minutes,
        run_index=-1,
        per_class_f1={c: sum(r.per_class_f1[c] for r in reports) / n for c in CLASSES},
        macro_f1=sum(r.macro_f1 for r in reports) / n,
        weighted_f1=sum(r.weighted_f1 for r in reports) / n,
        support={c: sum(r.support[c] for r in reports) for c in CLASSES},
        abstain_count=sum(r.abstain_count for r in reports),
    )


# --- prediction records and files ----------------------------------------------

@dataclass(frozen=True)
class PredictionRecord:
    """One model prediction for one incident at one horizon in one run."""

    model_id: str
    horizon_minutes: int
    run_index: int
    incident_id: str
    truth: ImpactClass
    predicted: Optional[ImpactClass]  # None = abstained
    raw_response: str = ""


def response_digest(raw: str) -> str:
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()[:16]


def write_results_jsonl(records: Sequence[PredictionRecord], path: Path) -> None:
    """Machine-readable per-prediction results file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            row = {
                "model_id": r.model_id,
                "horizon": r.horizon_minutes,
                "run_index": r.run_index,
                "incident_id": r.incident_id,
                "truth": r.truth.word,
                "predicted": r.predicted.word if r.predicted is not None else None,
                "raw_response_digest": response_digest(r.raw_response),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_results_jsonl(path: Path) -> List[PredictionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            records.append(
                PredictionRecord(
                    model_id=row["model_id"],
                    horizon_minutes=row["horizon"],
                    run_index=row["run_index"],
                    incident_id=row["incident_id"],
                    truth=ImpactClass.from_word(row["truth"]),
                    predicted=(
                        ImpactClass.from_word(row["predicted"])
                        if row["predicted"] is not None
                        else None
                    ),
                )
            )
    return records


def reports_from_records(records: Sequence[PredictionRecord]) -> List[MetricReport]:
    """Group records by (model, horizon, run) and recompute each MetricReport."""
    groups: Dict[Tuple[str, int, int], List[PredictionRecord]] = {}
    for r in records:
        groups.setdefault((r.model_id, r.horizon_minutes, r.run_index), []).append(r)
    reports = []
    for (model_id, horizon, run_index), group in sorted(groups.items()):
        matrix = confusion_matrix((r.truth, r.predicted) for r in group)
        reports.append(metric_report(matrix, model_id, horizon, run_index))
    return reports


# --- report rendering -----------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_summary_table(averaged: Sequence[MetricReport]) -> str:
    """Plain-text table, one row per (horizon, model), weighted and macro F1."""
    header = ("Horizon (min.)", "Model", "F1 (weighted)", "F1 (macro)")
    rows = [
        (str(r.horizon_minutes), r.model_id, _fmt(r.weighted_f1), _fmt(r.macro_f1))
        for r in sorted(averaged, key=lambda r: (r.horizon_minutes, r.model_id))
    ]
    return _format_table(header, rows)


def render_summary_csv(averaged: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["horizon_minutes", "model_id", "weighted_f1", "macro_f1", "abstains"])
    for r in sorted(averaged, key=lambda r: (r.horizon_minutes, r.model_id)):
        writer.writerow(
            [r.horizon_minutes, r.model_id, _fmt(r.weighted_f1), _fmt(r.macro_f1), r.abstain_count]
        )
    return buf.getvalue()


def render_sweep_table(rows: Sequence[Mapping[str, object]]) -> str:
    """Example-count sweep: one row per (horizon, model), one column per count."""
    counts = sorted({int(c) for row in rows for c in row["macro_by_count"]})
    header = ("Horizon (min.)", "Model") + tuple(f"{c} examples" for c in counts)
    body = []
    for row in sorted(rows, key=lambda r: (r["horizon_minutes"], r["model_id"])):
        by_count = {int(k): v for k, v in row["macro_by_count"].items()}
        body.append(
            (str(row["horizon_minutes"]), str(row["model_id"]))
            + tuple(_fmt(by_count[c]) if c in by_count else "-" for c in counts)
        )
    return _format_table(header, body)


def render_comparison_table(rows: Sequence[Mapping[str, object]]) -> str:
    """Selected-examples vs uniformly random examples, macro F1."""
    header = ("Horizon (min.)", "Model", "Selected (macro)", "Random (macro)", "Difference")
    body = []
    for row in sorted(rows, key=lambda r: (r["horizon_minutes"], r["model_id"])):
        selected = float(row["macro_selected"])
        random_score = float(row["macro_random"])
        body.append(
            (
                str(row["horizon_minutes"]),
                str(row["model_id"]),
                _fmt(selected),
                _fmt(random_score),
                f"{selected - random_score:+.2f}",
            )
        )
    return _format_table(header, body)


def _format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines) + "\n"


def metrics_json(per_run: Sequence[MetricReport], averaged: Sequence[MetricReport]) -> str:
    """Full-precision metrics for downstream tooling; rounding happens only in tables."""

    def encode(r: MetricReport) -> dict:
        return {
            "model_id": r.model_id,
            "horizon_minutes": r.horizon_minutes,
            "run_index": r.run_index,
            "per_class_f1": {c.word: r.per_class_f1[c] for c in CLASSES},
            "macro_f1": r.macro_f1,
            "weighted_f1": r.weighted_f1,
            "support": {c.word: r.support[c] for c in CLASSES},
            "abstains": r.abstain_count,
        }

    payload = {
        "runs": [encode(r) for r in per_run],
        "averages": [encode(r) for r in averaged],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def emit_report(
    out_dir: Path,
    per_run: Sequence[MetricReport],
    averaged: Sequence[MetricReport],
    records: Sequence[PredictionRecord],
    sweep_rows: Optional[Sequence[Mapping[str, object]]] = None,
    comparison_rows: Optional[Sequence[Mapping[str, object]]] = None,
) -> Dict[str, Path]:
    """Write the machine-readable results plus the plain-text and CSV tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": out_dir / "results.jsonl",
        "summary_txt": out_dir / "summary.txt",
        "summary_csv": out_dir / "summary.csv",
        "metrics_json": out_dir / "metrics.json",
    }
    write_results_jsonl(records, paths["results"])
    paths["summary_txt"].write_text(render_summary_table(averaged), encoding="utf-8")
    paths["summary_csv"].write_text(render_summary_csv(averaged), encoding="utf-8")
    paths["metrics_json"].write_text(metrics_json(per_run, averaged), encoding="utf-8")
    if sweep_rows is not None:
        paths["sweep_txt"] = out_dir / "sweep_k.txt"
        paths["sweep_txt"].write_text(render_sweep_table(sweep_rows), encoding="utf-8")
    if comparison_rows is not None:
        paths["comparison_txt"] = out_dir / "selection_vs_random.txt"
        paths["comparison_txt"].write_text(
            render_comparison_table(comparison_rows), encoding="utf-8"
        )
    return paths
