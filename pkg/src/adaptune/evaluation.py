"""Top-k accuracy, reciprocal-rank mAP, confidence histograms, cross-dataset averaging."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import kernels


@dataclass
class EvalResult:
    top1: float
    top5: float
    map: float
    n_samples: int
    histogram: List[int] = field(default_factory=list)
    mean_confidence: float = 0.0
    epochs: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def true_class_ranks(probs, labels) -> np.ndarray:
    """1-based rank of the true class in each row; ties go to the lower class index."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"probs must be [N, C], got {probs.shape}")
    return kernels.true_class_ranks(probs, np.asarray(labels, dtype=np.int64))


def topk_accuracy(probs, labels, k: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > probs.shape[1]:
        raise ValueError(f"k={k} exceeds class count {probs.shape[1]}")
    ranks = true_class_ranks(probs, labels)
    return float((ranks <= k).mean()) if ranks.size else 0.0


def mean_ap(probs, labels) -> float:
    """Mean over samples of 1 / rank(true class), correctly rounded.

    The sum is taken exactly over rank counts, so e.g. all-rank-C input
    gives exactly 1/C regardless of N.
    """
    return _map_from_ranks(true_class_ranks(probs, labels))


def _map_from_ranks(ranks: np.ndarray) -> float:
    if not ranks.size:
        return 0.0
    counts = np.bincount(ranks)
    total = sum(Fraction(int(c), r) for r, c in enumerate(counts) if c)
    return float(total / ranks.size)


def confidence_histogram(probs, bins: int = 20) -> List[int]:
    """Counts of per-sample max probability over [1/C, 1] in ``bins`` equal bins."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    probs = np.asarray(probs, dtype=np.float64)
    c = probs.shape[1]
    conf = np.clip(probs.max(axis=1), 1.0 / c, 1.0)
    counts, _ = np.histogram(conf, bins=bins, range=(1.0 / c, 1.0))
    return [int(v) for v in counts]


def evaluate(probs, labels, bins: int = 20) -> EvalResult:
    probs = np.asarray(probs, dtype=np.float64)
    ranks = true_class_ranks(probs, labels)
    k5 = min(5, probs.shape[1])
    return EvalResult(
        top1=float((ranks <= 1).mean()),
        top5=float((ranks <= k5).mean()),
        map=_map_from_ranks(ranks),
        n_samples=int(ranks.size),
        histogram=confidence_histogram(probs, bins),
        mean_confidence=float(probs.max(axis=1).mean()),
    )


AGG_FIELDS = ("top1", "top5", "map", "epochs")


def aggregate(reports: Sequence) -> Dict[str, float]:
    """Unweighted mean of each metric over datasets (every dataset counts equally)."""
    if not reports:
        raise ValueError("aggregate needs at least one report")
    rows = [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in reports]
    out = {}
    for key in AGG_FIELDS:
        values = [row[key] for row in rows if row.get(key) is not None]
        if values:
            out[key] = float(np.mean(values))
    return out


def write_ranks_csv(path, probs, labels) -> None:
    ranks = true_class_ranks(probs, labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label", "rank"])
        for i, (y, r) in enumerate(zip(labels, ranks)):
            writer.writerow([i, int(y), int(r)])
