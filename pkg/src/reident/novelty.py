"""Open-set detection: flag queries that match no known individual.

A query is suggested as a first sighting when its minimum gallery distance
exceeds a threshold; the threshold is calibrated by a grid search maximizing
F1 with "new" as the positive class. Equality with the threshold counts as
known (strictly greater means new).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import retrieval
from .retrieval import Gallery


@dataclass(frozen=True)
class GridSpec:
    lo: float = 0.0
    hi: float = 2.0  # unit-sphere diameter
    step: float = 0.005

    def points(self) -> np.ndarray:
        if self.lo > self.hi:
            raise ValueError("grid lo must be <= hi")
        if self.step <= 0:
            raise ValueError("grid step must be > 0")
        n = int(np.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        return self.lo + self.step * np.arange(n)


@dataclass
class GridPoint:
    t: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class ThresholdCalibration:
    threshold: float
    best_f1: float
    grid: GridSpec
    per_point: list[GridPoint]


@dataclass
class NoveltyOutcome:
    obs_id: int | None
    min_distance: float
    is_new: bool
    predicted_id: int | None


def min_distance(query: np.ndarray, gallery: Gallery) -> float:
    """Distance to the nearest gallery entry."""
    return float(retrieval.rank(query, gallery).distances[0])


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def calibrate_threshold(
    scored: list[tuple[float, bool]], grid: GridSpec = GridSpec()
) -> ThresholdCalibration:
    """Sweep every grid point; a query is predicted new iff its distance is
    strictly greater than the point. Returns the point with maximal F1
    (smallest such point on ties)."""
    if not scored:
        raise ValueError("scored set is empty")
    truths = {t for _, t in scored}
    if truths != {True, False}:
        raise ValueError("scored set must contain both new and known queries")
    dists = np.asarray([d for d, _ in scored])
    is_new = np.asarray([t for _, t in scored])

    per_point: list[GridPoint] = []
    best: GridPoint | None = None
    for t in grid.points():
        pred_new = dists > t
        tp = int(np.sum(pred_new & is_new))
        fp = int(np.sum(pred_new & ~is_new))
        fn = int(np.sum(~pred_new & is_new))
        tn = int(np.sum(~pred_new & ~is_new))
        point = GridPoint(t=float(t), f1=_f1(tp, fp, fn), tp=tp, fp=fp, fn=fn, tn=tn)
        per_point.append(point)
        if best is None or point.f1 > best.f1:
            best = point
    return ThresholdCalibration(
        threshold=best.t, best_f1=best.f1, grid=grid, per_point=per_point
    )


def detect(
    query: np.ndarray, gallery: Gallery, threshold: float, obs_id: int | None = None
) -> NoveltyOutcome:
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    ranked = retrieval.rank(query, gallery)
    d = float(ranked.distances[0])
    is_new = d > threshold
    return NoveltyOutcome(
        obs_id=obs_id,
        min_distance=d,
        is_new=is_new,
        predicted_id=None if is_new else int(ranked.individual_ids[0]),
    )


@dataclass
class OpenSetReport:
    accuracy: float
    n_predicted_new: int
    tp: int  # new predicted new
    fp: int  # known predicted new
    fn: int  # new predicted known
    tn: int  # known predicted known
    n_queries: int


def evaluate_open_set(
    queries: list[tuple[np.ndarray, bool, int | None]],
    gallery: Gallery,
    threshold: float,
) -> OpenSetReport:
    """queries: (embedding, truly_new, true_id when known).

    A query counts as correct when the new-vs-known call matches the truth
    and, for known queries predicted known, the nearest-neighbor identity is
    right. The plain new-vs-known confusion is reported alongside.
    """
    if not queries:
        raise ValueError("no queries")
    tp = fp = fn = tn = correct = 0
    for emb, truly_new, true_id in queries:
        outcome = detect(emb, gallery, threshold)
        if outcome.is_new:
            if truly_new:
                tp += 1
                correct += 1
            else:
                fp += 1
        else:
            if truly_new:
                fn += 1
            else:
                tn += 1
                if outcome.predicted_id == true_id:
                    correct += 1
    return OpenSetReport(
        accuracy=correct / len(queries),
        n_predicted_new=tp + fp,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        n_queries=len(queries),
    )
