"""Multi-label and single-label evaluation: average precision, mAP, accuracy.

AP is the non-interpolated precision-at-positive-ranks variant with ties
broken by stable original order. Classes without positives are excluded from
mAP (signaled through the per-class vector, not an exception).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError


def average_precision(scores, binary_targets) -> float:
    """Mean of precision@k over the ranks k of positive examples.

    Scores are sorted descending; ties keep their original order (stable).
    NaN for inputs without any positive (the caller excludes that class).
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(binary_targets)
    if scores.shape != targets.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} vs targets {targets.shape}")
    num_pos = int(targets.sum())
    if num_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    ranked = targets[order].astype(np.float64)
    cum_pos = np.cumsum(ranked)
    precision_at = cum_pos / np.arange(1, ranked.size + 1)
    return float((precision_at * ranked).sum() / num_pos)


def mean_average_precision(score_matrix, target_matrix) -> tuple[float, np.ndarray]:
    """(mAP, per-class AP) over classes with at least one positive."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    targets = np.asarray(target_matrix)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} vs targets {targets.shape}")
    per_class = np.array(
        [average_precision(scores[:, c], targets[:, c]) for c in range(scores.shape[1])]
    )
    included = ~np.isnan(per_class)
    if not included.any():
        raise DataError("mAP undefined: no class has a positive example")
    return float(per_class[included].mean()), per_class


def accuracy(pred_class, true_class) -> float:
    pred = np.asarray(pred_class)
    true = np.asarray(true_class)
    if pred.shape != true.shape:
        raise ShapeError(f"predictions {pred.shape} vs labels {true.shape}")
    if pred.size == 0:
        raise DataError("accuracy of an empty evaluation set")
    return float((pred == true).mean())


@dataclass
class EvalReport:
    """Evaluation summary; accuracy is present only for single-label data."""

    map_score: float
    per_class_ap: list = field(default_factory=list)
    accuracy: float | None = None
    num_examples: int = 0

    def to_dict(self) -> dict:
        out = {
            "map": self.map_score,
            "per_class_ap": [None if np.isnan(a) else float(a) for a in self.per_class_ap],
            "num_examples": self.num_examples,
        }
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        return out


def evaluate_scores(score_matrix, target_matrix) -> EvalReport:
    """Build an EvalReport; accuracy is added when every row is single-label."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    targets = np.asarray(target_matrix)
    map_score, per_class = mean_average_precision(scores, targets)
    report = EvalReport(
        map_score=map_score,
        per_class_ap=per_class.tolist(),
        num_examples=scores.shape[0],
    )
    if np.all(targets.sum(axis=1) == 1):
        report.accuracy = accuracy(scores.argmax(axis=1), targets.argmax(axis=1))
    return report
