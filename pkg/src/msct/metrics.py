"""Evaluation metrics: confusion counts, F1, AUC-ROC, and the final score.

The final score weights all sources equally: it is the mean over sources of
the per-source average of COVID and non-COVID F1, so strong numbers on
data-rich sources cannot offset degradation elsewhere. F1 defaults to 0.0
when a class has no true and no predicted instances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import N_SOURCES


@dataclass(frozen=True)
class PredictionRecord:
    scan_id: str
    source: int
    label: int
    covid_probability: float

    def __post_init__(self):
        if not 0.0 <= self.covid_probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.covid_probability}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class SourceF1:
    f1_covid: float
    f1_noncovid: float

    @property
    def average(self) -> float:
        return 0.5 * (self.f1_covid + self.f1_noncovid)


@dataclass
class EvalReport:
    accuracy: float
    f1: float
    auc: float
    sensitivity: float
    specificity: float
    per_source: dict[int, SourceF1]
    final_score: float


def confusion(records: Sequence[PredictionRecord], threshold: float = 0.5) -> ConfusionCounts:
    """Counts at a fixed operating point; probability == threshold is positive."""
    tp = fp = tn = fn = 0
    for rec in records:
        predicted = rec.covid_probability >= threshold
        if rec.label == 1:
            tp, fn = (tp + 1, fn) if predicted else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if predicted else (fp, tn + 1)
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def f1_binary(counts: ConfusionCounts, positive_class: int = 1) -> float:
    """F1 = 2tp / (2tp + fp + fn) for the designated positive class.

    positive_class=0 relabels so that non-COVID is positive. Returns 0.0
    when the denominator vanishes (no true and no predicted positives).
    """
    if positive_class == 1:
        tp, fp, fn = counts.tp, counts.fp, counts.fn
    else:
        tp, fp, fn = counts.tn, counts.fn, counts.fp
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2.0 * tp / denom


def sensitivity(counts: ConfusionCounts) -> float:
    pos = counts.tp + counts.fn
    return counts.tp / pos if pos else 0.0


def specificity(counts: ConfusionCounts) -> float:
    neg = counts.tn + counts.fp
    return counts.tn / neg if neg else 0.0


def accuracy(counts: ConfusionCounts) -> float:
    return (counts.tp + counts.tn) / counts.total if counts.total else 0.0


def auc_roc(records: Sequence[PredictionRecord]) -> float:
    """Mann-Whitney AUC via average rank sums; ties count one half.

    Equals the fraction of (positive, negative) pairs where the positive
    scores higher, with 0.5 credit for ties. Raises on single-class input.
    """
    scores = np.array([r.covid_probability for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need at least one positive and one negative record")
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[labels == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def final_score(per_source_pairs: Sequence[tuple[float, float]]) -> float:
    """Mean over sources of the per-source average of both class F1 values."""
    averages = [0.5 * (c + nc) for c, nc in per_source_pairs]
    return float(np.mean(averages))


def report_from_records(
    records: Sequence[PredictionRecord],
    threshold: float = 0.5,
    n_sources: int = N_SOURCES,
) -> EvalReport:
    """Assemble the full evaluation report from scored records."""
    counts = confusion(records, threshold)
    per_source: dict[int, SourceF1] = {}
    for src in range(n_sources):
        sub = [r for r in records if r.source == src]
        c = confusion(sub, threshold)
        per_source[src] = SourceF1(
            f1_covid=f1_binary(c, positive_class=1),
            f1_noncovid=f1_binary(c, positive_class=0),
        )
    return EvalReport(
        accuracy=accuracy(counts),
        f1=f1_binary(counts, positive_class=1),
        auc=auc_roc(records),
        sensitivity=sensitivity(counts),
        specificity=specificity(counts),
        per_source=per_source,
        final_score=final_score([(s.f1_covid, s.f1_noncovid) for s in per_source.values()]),
    )


def evaluate(params, items, threshold: float = 0.5, n_sources: int = N_SOURCES) -> EvalReport:
    """Run eval-mode forward on every labeled bundle and score the results.

    ``items`` is a sequence of LabeledBundle; ``params`` a nncore ModelParams
    snapshot. Deterministic: eval mode disables dropout.
    """
    from .nncore import forward_scan

    records = []
    for item in items:
        out = forward_scan(params, item.images, mode="eval")
        prob = 1.0 / (1.0 + np.exp(-out.covid_logit))
        records.append(
            PredictionRecord(
                scan_id=item.scan_id,
                source=item.source,
                label=item.label,
                covid_probability=float(prob),
            )
        )
    return report_from_records(records, threshold=threshold, n_sources=n_sources)


@dataclass
class LabeledBundle:
    """A preprocessed scan ready for the model: 8 slice images plus labels."""

    scan_id: str
    source: int
    label: int
    images: np.ndarray


CSV_COLUMNS = (
    ["config_id", "loss", "gamma", "seed", "status", "best_epoch"]
    + ["accuracy", "f1", "auc", "sensitivity", "specificity"]
    + [f"f1_s{i}_{cls}" for i in range(N_SOURCES) for cls in ("covid", "noncovid")]
    + ["final_score"]
)


def fmt(x: float) -> str:
    return f"{x:.10g}"


def report_csv_fields(report: EvalReport) -> list[str]:
    fields = [fmt(report.accuracy), fmt(report.f1), fmt(report.auc), fmt(report.sensitivity), fmt(report.specificity)]
    for i in sorted(report.per_source):
        s = report.per_source[i]
        fields += [fmt(s.f1_covid), fmt(s.f1_noncovid)]
    fields.append(fmt(report.final_score))
    return fields


def report_text(report: EvalReport) -> str:
    lines = [
        f"accuracy    {report.accuracy:.4f}",
        f"f1          {report.f1:.4f}",
        f"auc         {report.auc:.4f}",
        f"sensitivity {report.sensitivity:.4f}",
        f"specificity {report.specificity:.4f}",
    ]
    for i in sorted(report.per_source):
        s = report.per_source[i]
        lines.append(
            f"source {i}:   f1_covid {s.f1_covid:.4f}  f1_noncovid {s.f1_noncovid:.4f}  avg {s.average:.4f}"
        )
    lines.append(f"final score {report.final_score:.4f}")
    return "\n".join(lines)
