"""Calibration and scaling instruments: ECE, AUROC, confidence drop, and
log-linear scaling-slope fits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import DegenerateClasses, DegenerateDesign, NoRecords


@dataclass(frozen=True)
class OutcomeRecord:
    """One scored question: certainty in (0, 1], correctness, condition tag."""

    certainty: float
    correct: bool
    condition: str = "origin"

    def __post_init__(self) -> None:
        if not 0.0 < self.certainty <= 1.0:
            raise ValueError(f"certainty must be in (0, 1], got {self.certainty}")


@dataclass(frozen=True)
class ScalingPoint:
    """Accuracy (percent or fraction, caller's choice) at a sample count."""

    n: int
    accuracy: float

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"sample count must be >= 1, got {self.n}")


@dataclass
class CalibrationReport:
    """Per-run calibration summary; fields are None where undefined."""

    accuracy: float
    ece: float
    auroc: float | None
    confidence_drop: float | None
    mean_certainty: float
    n_records: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "ece": self.ece,
            "auroc": self.auroc,
            "confidence_drop": self.confidence_drop,
            "mean_certainty": self.mean_certainty,
            "n_records": self.n_records,
        }


def ece(records: Sequence[OutcomeRecord], bins: int = 10) -> float:
    """Expected calibration error over equal-width certainty bins on (0, 1].

    Bin b covers (b/bins, (b+1)/bins]; each occupied bin contributes its
    record share times |accuracy - mean certainty|.
    """
    if not records:
        raise NoRecords("ece needs at least one record")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    grouped: dict[int, list[OutcomeRecord]] = {}
    for r in records:
        idx = min(bins - 1, max(0, math.ceil(r.certainty * bins) - 1))
        grouped.setdefault(idx, []).append(r)
    n = len(records)
    total = 0.0
    for members in grouped.values():
        acc = sum(1 for r in members if r.correct) / len(members)
        conf = math.fsum(r.certainty for r in members) / len(members)
        total += (len(members) / n) * abs(acc - conf)
    return total


def auroc(records: Sequence[OutcomeRecord]) -> float:
    """Probability a random correct record out-ranks a random incorrect one.

    Computed from midranks, which is exactly the all-pairs count with ties
    scored one half.
    """
    if not records:
        raise NoRecords("auroc needs at least one record")
    n_pos = sum(1 for r in records if r.correct)
    n_neg = len(records) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClasses(
            f"auroc needs both classes, got {n_pos} correct / {n_neg} incorrect"
        )
    ordered = sorted(records, key=lambda r: r.certainty)
    ranks: dict[int, float] = {}
    i = 0
    while i < len(ordered):
        j = i
        while j < len(ordered) and ordered[j].certainty == ordered[i].certainty:
            j += 1
        midrank = (i + 1 + j) / 2.0  # average of ranks i+1 .. j
        for k in range(i, j):
            ranks[k] = midrank
        i = j
    rank_sum_pos = math.fsum(ranks[k] for k, r in enumerate(ordered) if r.correct)
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def confidence_drop(
    origin: Sequence[OutcomeRecord], perturbed: Sequence[OutcomeRecord]
) -> float:
    """Mean certainty under perturbation minus mean certainty at origin.

    Negative values mean confidence drops when the input degrades, which is
    the desired sensitivity signature.
    """
    if not origin or not perturbed:
        raise NoRecords("confidence drop needs records on both sides")
    mean_origin = math.fsum(r.certainty for r in origin) / len(origin)
    mean_pert = math.fsum(r.certainty for r in perturbed) / len(perturbed)
    return mean_pert - mean_origin


def scaling_slope(points: Sequence[ScalingPoint]) -> tuple[float, float]:
    """Ordinary least squares of accuracy against log2(sample count).

    Returns (slope, intercept).
    """
    if len({p.n for p in points}) < 2:
        raise DegenerateDesign("scaling fit needs at least two distinct sample counts")
    xs = [math.log2(p.n) for p in points]
    ys = [p.accuracy for p in points]
    n = len(points)
    mean_x = math.fsum(xs) / n
    mean_y = math.fsum(ys) / n
    sxx = math.fsum((x - mean_x) ** 2 for x in xs)
    sxy = math.fsum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    slope = sxy / sxx
    return slope, mean_y - slope * mean_x


def accuracy(records: Sequence[OutcomeRecord]) -> float:
    if not records:
        raise NoRecords("accuracy needs at least one record")
    return sum(1 for r in records if r.correct) / len(records)


def build_report(
    records: Sequence[OutcomeRecord],
    perturbed: Sequence[OutcomeRecord] | None = None,
    bins: int = 10,
) -> CalibrationReport:
    """Assemble the standard report; AUROC/CD degrade to None, not errors."""
    if not records:
        raise NoRecords("report needs at least one record")
    try:
        auc: float | None = auroc(records)
    except DegenerateClasses:
        auc = None
    drop = confidence_drop(records, perturbed) if perturbed else None
    return CalibrationReport(
        accuracy=accuracy(records),
        ece=ece(records, bins),
        auroc=auc,
        confidence_drop=drop,
        mean_certainty=math.fsum(r.certainty for r in records) / len(records),
        n_records=len(records),
    )
