"""Average precision (PR-AUC) and its per-disease / macro summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np


def average_precision(scores, labels) -> float:
    """Step-wise average precision, ``sum_k (R_k - R_{k-1}) * P_k``.

    Thresholds run over the distinct scores in descending order, so tied
    scores form one group and the result does not depend on their order.
    Returns NaN when there are no positives.  The sum is accumulated in exact
    rational arithmetic, so the result is the correctly rounded AP and does
    not depend on summation order.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    n_pos = int(y.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.append(np.nonzero(np.diff(s))[0], s.size - 1)
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    gained = np.diff(np.concatenate(([0], tp)))
    total = sum(Fraction(int(g) * int(t), int(k)) for g, t, k in zip(gained, tp, seen) if g)
    return float(total / n_pos)


@dataclass
class PraucReport:
    per_disease: np.ndarray
    macro: float
    undefined_labels: list[int] = field(default_factory=list)


def macro_prauc(predictions, labels) -> PraucReport:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 2:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} must be matching B x N matrices")
    per = np.array([average_precision(p[:, n], y[:, n]) for n in range(p.shape[1])])
    undefined = [int(n) for n in np.nonzero(np.isnan(per))[0]]
    defined = per[~np.isnan(per)]
    macro = float(defined.mean()) if defined.size else float("nan")
    return PraucReport(per, macro, undefined)


@dataclass
class ReportRow:
    disease: str
    score: float
    baseline: float | None = None

    @property
    def delta_pct(self) -> float | None:
        if self.baseline is None or not self.baseline or math.isnan(self.baseline) or math.isnan(self.score):
            return None
        return (self.score - self.baseline) / self.baseline * 100.0


def per_disease_report(predictions, labels, names: Sequence[str],
                       baseline: Sequence[float] | None = None) -> list[ReportRow]:
    """One row per disease: AP and the relative change against ``baseline`` scores."""
    report = macro_prauc(predictions, labels)
    if len(names) != report.per_disease.size:
        raise ValueError(f"{len(names)} disease names for {report.per_disease.size} labels")
    if baseline is not None and len(baseline) != len(names):
        raise ValueError(f"{len(baseline)} baseline scores for {len(names)} labels")
    return [ReportRow(name, float(score), None if baseline is None else float(baseline[i]))
            for i, (name, score) in enumerate(zip(names, report.per_disease))]


def _fmt(x: float | None) -> str:
    if x is None or math.isnan(x):
        return ""
    return f"{x:.6f}"


def format_report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["disease", "prauc", "baseline_prauc", "relative_delta"])
    for row in rows:
        delta = row.delta_pct
        writer.writerow([row.disease, _fmt(row.score), _fmt(row.baseline),
                         "" if delta is None else f"{delta:+.1f}%"])
    return buf.getvalue()


def read_report_scores(path) -> list[float]:
    """Per-disease ``prauc`` column of a report CSV, NaN for blanks."""
    with open(path, newline="", encoding="utf-8") as fh:
        return [float(r["prauc"]) if r["prauc"] else float("nan") for r in csv.DictReader(fh)]
