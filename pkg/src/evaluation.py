"""
Evaluation Metrics
==================

Pooled (day, cell) scoring for imbalanced forecasts:

* ROC AUC as the Mann-Whitney statistic from midranks (ties count half)
* PR AUC as average precision, equal scores processed as one block
* confusion counts with the strict alarm rule ``score > t``

All counts are exact integers, so the rank-based ROC AUC equals the pairwise
concordance count divided by P * N bit for bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Sequence, TextIO

import numpy as np
import pandas as pd

from src.catalog import LabelTensor
from src.exceptions import NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredSamples:
    """Parallel arrays of scores in [0, 1] and binary labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if scores.shape != labels.shape:
            raise ShapeMismatchError(f"{scores.size} scores vs {labels.size} labels")
        if not np.all(np.isfinite(scores)):
            raise NonFiniteError("scores must be finite")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.uint8))

    def __len__(self) -> int:
        return int(self.scores.size)

    @property
    def positives(self) -> int:
        return int(np.count_nonzero(self.labels))

    @property
    def negatives(self) -> int:
        return len(self) - self.positives


def pool_samples(probabilities: np.ndarray, labels: LabelTensor) -> ScoredSamples:
    """Flatten (day, row, col) probability maps over cells with valid_mask 1."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if probabilities.shape != labels.y.shape:
        raise ShapeMismatchError(
            f"probability maps {probabilities.shape} vs labels {labels.y.shape}"
        )
    valid = labels.valid_mask.astype(bool)
    return ScoredSamples(scores=probabilities[valid], labels=labels.y[valid])


# =============================================================================
# AREA METRICS
# =============================================================================

def _midranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    _, first, counts = np.unique(scores[order], return_index=True, return_counts=True)
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.repeat(first + (counts + 1) / 2.0, counts)
    return ranks


def roc_auc(samples: ScoredSamples) -> float:
    """
    P(score+ > score-) + 0.5 P(tie).

    Raises:
        ValueError: only one class present
    """
    positives, negatives = samples.positives, samples.negatives
    if positives == 0 or negatives == 0:
        raise ValueError("roc_auc needs at least one positive and one negative")
    rank_sum = _midranks(samples.scores)[samples.labels == 1].sum()
    u_statistic = rank_sum - positives * (positives + 1) / 2.0
    return float(u_statistic / (positives * negatives))


def pr_auc(samples: ScoredSamples) -> float:
    """
    Average precision: sum over distinct score cuts (descending) of
    delta-recall times precision at that cut.

    Raises:
        ValueError: no positives
    """
    positives = samples.positives
    if positives == 0:
        raise ValueError("pr_auc needs at least one positive")
    order = np.argsort(-samples.scores, kind="mergesort")
    scores = samples.scores[order]
    hits = samples.labels[order].astype(np.int64)
    cut_ends = np.append(np.flatnonzero(np.diff(scores) != 0), scores.size - 1)
    tp = np.cumsum(hits)[cut_ends]
    seen = cut_ends + 1
    gained = np.diff(np.append(0, tp))
    keep = gained > 0
    terms = (gained[keep] * tp[keep]) / (positives * seen[keep])
    return float(math.fsum(terms.tolist()))


# =============================================================================
# CONFUSION
# =============================================================================

class ThresholdRow(NamedTuple):
    threshold: float
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def recall(self) -> float:
        total = self.tp + self.fn
        return self.tp / total if total else float("nan")


def confusion_at(samples: ScoredSamples, threshold: float) -> ThresholdRow:
    """Counts with alarm iff score > threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    fired = samples.scores > threshold
    positive = samples.labels == 1
    tp = int(np.count_nonzero(fired & positive))
    fp = int(np.count_nonzero(fired & ~positive))
    return ThresholdRow(threshold, tp, samples.positives - tp, fp, samples.negatives - fp)


def threshold_sweep(samples: ScoredSamples, thresholds: Sequence[float]) -> List[ThresholdRow]:
    """
    Confusion rows for ascending thresholds; FP never grows and FN never shrinks
    down the rows.
    """
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    if thresholds and not (0.0 <= thresholds[0] and thresholds[-1] <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    positive = samples.labels == 1
    pos_scores = np.sort(samples.scores[positive])
    neg_scores = np.sort(samples.scores[~positive])
    rows = []
    for t in thresholds:
        fn = int(np.searchsorted(pos_scores, t, side="right"))
        tn = int(np.searchsorted(neg_scores, t, side="right"))
        rows.append(ThresholdRow(t, pos_scores.size - fn, fn, neg_scores.size - tn, tn))
    return rows


# =============================================================================
# REPORTS
# =============================================================================

@dataclass
class MetricsReport:
    """Headline metrics plus the threshold table for one scored method."""

    method: str
    roc_auc: float
    pr_auc: float
    positives: int
    negatives: int
    rows: List[ThresholdRow] = field(default_factory=list)


def evaluate(samples: ScoredSamples, thresholds: Sequence[float], method: str = "model") -> MetricsReport:
    """Score a pooled sample set; undefined AUCs (single class) are reported as NaN."""
    roc = roc_auc(samples) if samples.positives and samples.negatives else float("nan")
    pr = pr_auc(samples) if samples.positives else float("nan")
    if math.isnan(roc):
        logger.warning("%s: ROC AUC undefined (%d positives, %d negatives)",
                       method, samples.positives, samples.negatives)
    return MetricsReport(
        method=method, roc_auc=roc, pr_auc=pr,
        positives=samples.positives, negatives=samples.negatives,
        rows=threshold_sweep(samples, thresholds),
    )


def write_metrics_csv(sink: TextIO, reports: Sequence[MetricsReport]) -> int:
    frame = pd.DataFrame(
        [(r.method, r.roc_auc, r.pr_auc, r.positives, r.negatives) for r in reports],
        columns=["method", "roc_auc", "pr_auc", "positives", "negatives"],
    )
    frame.to_csv(sink, index=False, lineterminator="\n")
    return len(frame)


def write_sweep_csv(sink: TextIO, reports: Sequence[MetricsReport]) -> int:
    frame = pd.DataFrame(
        [(r.method,) + tuple(row) for r in reports for row in r.rows],
        columns=["method", "threshold", "tp", "fn", "fp", "tn"],
    )
    frame.to_csv(sink, index=False, lineterminator="\n")
    return len(frame)
