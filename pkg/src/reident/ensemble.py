"""Direction classification and the two-view rank ensemble.

Two embedding models are trained, one per side; a paired query is answered
by merging both ranked lists and taking the first class, which for the
default distance merge equals the class at the global minimum distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import embedding, features, retrieval
from .datagen import Observation, Side
from .errors import ConfigError
from .features import Backbone
from .retrieval import Gallery, RankedList


@dataclass
class DirectionClassifier:
    weight: np.ndarray  # (F,)
    bias: float


@dataclass
class PairedQuery:
    left_obs: Observation
    right_obs: Observation

    def validate(self) -> None:
        if self.left_obs.side is not Side.LEFT or self.right_obs.side is not Side.RIGHT:
            raise ValueError("paired query sides must be (L, R)")
        if self.left_obs.individual_id != self.right_obs.individual_id:
            raise ValueError("paired query must be one individual")
        if self.left_obs.capture_day != self.right_obs.capture_day:
            raise ValueError("paired query must share a capture day")


def _observation_features(backbone: Backbone, observations: list[Observation]) -> np.ndarray:
    images = np.stack(
        [features.letterbox(obs.image, backbone.input_size) for obs in observations]
    )
    feats, _ = features.extract_batch(backbone, images)
    return feats


def train_direction(
    backbone: Backbone,
    observations: list[Observation],
    labels: np.ndarray | None = None,
    seed: int = 0,
    lr: float = 1.0,
    max_epochs: int = 500,
    tol: float = 1e-8,
) -> DirectionClassifier:
    """Logistic side classifier over featurizer outputs, full-batch gradient
    descent until the loss moves less than tol or max_epochs."""
    if labels is None:
        labels = np.asarray([1.0 if o.side is Side.RIGHT else 0.0 for o in observations])
    else:
        labels = np.asarray(labels, dtype=np.float64)
    if len(set(labels.tolist())) < 2:
        raise ConfigError("direction training needs both classes present")

    x = _observation_features(backbone, observations)
    # Standardize for conditioning, then fold the scaling back into the
    # returned raw-feature weights.
    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    sigma[sigma == 0] = 1.0
    z = (x - mu) / sigma

    rng = np.random.default_rng(np.random.SeedSequence([0xD14, seed]))
    w = rng.standard_normal(z.shape[1]) * 0.01
    b = 0.0
    n = len(labels)
    prev_loss = math.inf
    for _ in range(max_epochs):
        logits = z @ w + b
        p = 1.0 / (1.0 + np.exp(-logits))
        eps = 1e-12
        loss = -float(np.mean(labels * np.log(p + eps) + (1 - labels) * np.log(1 - p + eps)))
        if abs(prev_loss - loss) < tol:
            break
        prev_loss = loss
        grad = (p - labels) / n
        w -= lr * (z.T @ grad)
        b -= lr * float(grad.sum())
    raw_w = w / sigma
    raw_b = b - float((w * mu / sigma).sum())
    return DirectionClassifier(weight=raw_w, bias=raw_b)


def direction_probability(clf: DirectionClassifier, backbone: Backbone, obs: Observation) -> float:
    f = features.extract(backbone, features.letterbox(obs.image, backbone.input_size))
    return float(1.0 / (1.0 + math.exp(-(f @ clf.weight + clf.bias))))


def classify_direction(clf: DirectionClassifier, backbone: Backbone, obs: Observation) -> Side:
    """Right iff the sigmoid output is >= 0.5 (boundary goes Right)."""
    return Side.RIGHT if direction_probability(clf, backbone, obs) >= 0.5 else Side.LEFT


@dataclass
class MergedItem:
    obs_id: int
    individual_id: int
    distance: float
    side: Side


def merge_ranked(
    left: RankedList, right: RankedList, mode: str = "distance"
) -> list[MergedItem]:
    """Merge two per-side ranked lists into one.

    distance mode orders by distance ascending (ties: left first, then
    obs_id). rank mode interleaves by list position instead.
    """
    if len(left) == 0 or len(right) == 0:
        raise ValueError("both ranked lists must be nonempty")
    items = [
        (float(left.distances[i]), 0, int(left.obs_ids[i]), int(left.individual_ids[i]), i)
        for i in range(len(left))
    ] + [
        (float(right.distances[i]), 1, int(right.obs_ids[i]), int(right.individual_ids[i]), i)
        for i in range(len(right))
    ]
    if mode == "distance":
        items.sort(key=lambda t: (t[0], t[1], t[2]))
    elif mode == "rank":
        items.sort(key=lambda t: (t[4], t[1], t[2]))
    else:
        raise ValueError(f"unknown merge mode {mode!r}")
    return [
        MergedItem(
            obs_id=obs,
            individual_id=ind,
            distance=dist,
            side=Side.RIGHT if side_flag else Side.LEFT,
        )
        for dist, side_flag, obs, ind, _ in items
    ]


def fuse_pair(left: RankedList, right: RankedList, mode: str = "distance") -> int:
    """Class of the first merged item; for distance mode this is the class at
    the global minimum distance across both sides."""
    return merge_ranked(left, right, mode)[0].individual_id


@dataclass
class SideMetrics:
    accuracy_at_1: float
    accuracy_at_5: float
    map_at_5: float


@dataclass
class EnsembleReport:
    left: SideMetrics
    right: SideMetrics
    fused: SideMetrics
    n_pairs: int


def _merged_metrics(
    merged_lists: list[list[MergedItem]],
    true_ids: list[int],
    relevant_counts: list[int],
) -> SideMetrics:
    hits1 = hits5 = 0
    aps = []
    for merged, true_id, r in zip(merged_lists, true_ids, relevant_counts):
        labels = [m.individual_id for m in merged]
        if labels[0] == true_id:
            hits1 += 1
        if true_id in labels[:5]:
            hits5 += 1
        score = 0.0
        hits = 0
        for i, label in enumerate(labels[:5], start=1):
            if label == true_id:
                hits += 1
                score += hits / i
        aps.append(score / min(r, 5) if r else 0.0)
    n = len(true_ids)
    return SideMetrics(hits1 / n, hits5 / n, float(np.mean(aps)))


def evaluate_ensemble(
    pairs: list[PairedQuery],
    left_head: embedding.EmbeddingHead,
    left_backbone: Backbone,
    right_head: embedding.EmbeddingHead,
    right_backbone: Backbone,
    left_gallery: Gallery,
    right_gallery: Gallery,
    mode: str = "distance",
) -> EnsembleReport:
    """Per-side and fused metrics over paired queries."""
    if not pairs:
        raise ValueError("no paired queries")
    for pair in pairs:
        pair.validate()

    left_feats = _observation_features(left_backbone, [p.left_obs for p in pairs])
    right_feats = _observation_features(right_backbone, [p.right_obs for p in pairs])
    left_emb = embedding.embed_batch(left_head, left_feats)
    right_emb = embedding.embed_batch(right_head, right_feats)

    true_ids = [p.left_obs.individual_id for p in pairs]
    left_results = []
    right_results = []
    merged_lists = []
    union_relevant = []
    for i, true_id in enumerate(true_ids):
        lr_list = retrieval.rank(left_emb[i], left_gallery)
        rr_list = retrieval.rank(right_emb[i], right_gallery)
        left_results.append((lr_list, true_id))
        right_results.append((rr_list, true_id))
        merged_lists.append(merge_ranked(lr_list, rr_list, mode))
        union_relevant.append(
            int(np.sum(left_gallery.individual_ids == true_id))
            + int(np.sum(right_gallery.individual_ids == true_id))
        )

    def side_metrics(results):
        return SideMetrics(
            accuracy_at_1=retrieval.accuracy_at_k(results, 1),
            accuracy_at_5=retrieval.accuracy_at_k(results, 5),
            map_at_5=retrieval.map_at_5(results),
        )

    return EnsembleReport(
        left=side_metrics(left_results),
        right=side_metrics(right_results),
        fused=_merged_metrics(merged_lists, true_ids, union_relevant),
        n_pairs=len(pairs),
    )
