"""Embedding head and its trainer.

A linear projection onto the unit hypersphere, trained with online hard
triplet mining (margin 1.0 by default) and plain SGD in two stages: head
only first, then head plus the featurizer's last convolution bank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import features
from .datagen import DatasetSplit, Observation
from .errors import ConfigError, DegenerateEmbeddingError
from .features import AugmentParams, Backbone, Stage2Cache

EMBED_DIM = 128


@dataclass
class EmbeddingHead:
    weight: np.ndarray  # (F, EMBED_DIM)
    bias: np.ndarray  # (EMBED_DIM,)

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]


MINING_MODES = ("hard", "batch_hard")


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    batch_size: int = 32
    stage1_epochs: int = 100
    stage2_epochs: int = 100
    stage1_lr: float = 0.001
    stage2_lr: float = 0.0001
    pk_classes: int = 8
    pk_samples: int = 4
    seed: int = 0
    mining: str = "hard"

    def __post_init__(self):
        if self.pk_classes * self.pk_samples != self.batch_size:
            raise ConfigError("pk_classes * pk_samples must equal batch_size")
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if min(self.stage1_epochs, self.stage2_epochs) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.mining not in MINING_MODES:
            raise ConfigError(f"mining must be one of {MINING_MODES}")


@dataclass
class EpochStats:
    epoch: int
    stage: int
    mean_loss: float


@dataclass
class TrainResult:
    head: EmbeddingHead
    backbone: Backbone
    log: list[EpochStats] = field(default_factory=list)


def init_head(feature_dim: int, rng: np.random.Generator) -> EmbeddingHead:
    weight = rng.standard_normal((feature_dim, EMBED_DIM)) / math.sqrt(feature_dim)
    return EmbeddingHead(weight=weight, bias=np.zeros(EMBED_DIM))


def embed_batch(head: EmbeddingHead, feats: np.ndarray) -> np.ndarray:
    """Project features and normalize each row to the unit hypersphere."""
    u = feats @ head.weight + head.bias
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateEmbeddingError("pre-normalization vector is exactly zero")
    return u / norms


def embed(head: EmbeddingHead, f: np.ndarray) -> np.ndarray:
    return embed_batch(head, f[None])[0]


def pairwise_distances(embeddings: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance matrix; symmetric with a zero diagonal."""
    e = np.asarray(embeddings)
    if e.ndim != 2 or e.shape[0] < 1:
        raise ValueError("embeddings must be a nonempty (N, D) array")
    diff = e[:, None, :] - e[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def mine_hard_triplets(
    batch_embeddings: np.ndarray, labels: np.ndarray, margin: float = 1.0
) -> list[tuple[int, int, int]]:
    """All valid (anchor, positive, negative) triplets where the negative is
    closer to the anchor than the positive, in (a, p, n) ascending order.

    An empty result just means no triplet in the batch is hard.
    """
    labels = np.asarray(labels)
    d = pairwise_distances(batch_embeddings)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask[:, :, None] & neg_mask[:, None, :]
    hard = d[:, None, :] < d[:, :, None]  # d(a, n) < d(a, p)
    mined = np.argwhere(valid & hard)
    return [tuple(int(i) for i in row) for row in mined]


def triplet_loss(
    batch_embeddings: np.ndarray, labels: np.ndarray, margin: float = 1.0
) -> tuple[float, np.ndarray]:
    """Mean hinge loss over mined hard triplets and its gradient w.r.t. the
    embeddings. Returns (0, zeros) when nothing is mined."""
    e = np.asarray(batch_embeddings, dtype=np.float64)
    grad = np.zeros_like(e)
    mined = mine_hard_triplets(e, labels, margin)
    if not mined:
        return 0.0, grad
    idx = np.asarray(mined)
    a, p, n = idx[:, 0], idx[:, 1], idx[:, 2]
    d_ap = np.linalg.norm(e[a] - e[p], axis=1)
    d_an = np.linalg.norm(e[a] - e[n], axis=1)
    terms = d_ap - d_an + margin
    active = terms > 0
    loss = float(np.sum(np.maximum(terms, 0.0)) / len(mined))

    # Subgradient of mean(max(0, d_ap - d_an + m)); zero-distance pairs get a
    # zero subgradient for their norm.
    scale = active.astype(float) / len(mined)
    with np.errstate(divide="ignore", invalid="ignore"):
        uap = np.where(d_ap[:, None] > 0, (e[a] - e[p]) / np.where(d_ap == 0, 1, d_ap)[:, None], 0.0)
        uan = np.where(d_an[:, None] > 0, (e[a] - e[n]) / np.where(d_an == 0, 1, d_an)[:, None], 0.0)
    np.add.at(grad, a, scale[:, None] * (uap - uan))
    np.add.at(grad, p, -scale[:, None] * uap)
    np.add.at(grad, n, scale[:, None] * uan)
    return loss, grad


def batch_hard_loss(
    batch_embeddings: np.ndarray, labels: np.ndarray, margin: float = 1.0
) -> tuple[float, np.ndarray]:
    """Batch-hard variant: per anchor, hinge on (hardest positive - hardest
    negative + margin), averaged over anchors that have both a positive and
    a negative. Keeps pushing until the margin is met, unlike the plain
    hard-triplet filter which goes quiet at the mining boundary."""
    e = np.asarray(batch_embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    grad = np.zeros_like(e)
    d = pairwise_distances(e)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not valid.any():
        return 0.0, grad
    p_idx = np.argmax(np.where(pos_mask, d, -np.inf), axis=1)
    n_idx = np.argmin(np.where(neg_mask, d, np.inf), axis=1)
    anchors = np.flatnonzero(valid)
    d_ap = d[anchors, p_idx[anchors]]
    d_an = d[anchors, n_idx[anchors]]
    terms = d_ap - d_an + margin
    active = terms > 0
    loss = float(np.sum(np.maximum(terms, 0.0)) / len(anchors))
    scale = active.astype(float) / len(anchors)
    a, p, m = anchors, p_idx[anchors], n_idx[anchors]
    with np.errstate(divide="ignore", invalid="ignore"):
        uap = np.where(d_ap[:, None] > 0, (e[a] - e[p]) / np.where(d_ap == 0, 1, d_ap)[:, None], 0.0)
        uan = np.where(d_an[:, None] > 0, (e[a] - e[m]) / np.where(d_an == 0, 1, d_an)[:, None], 0.0)
    np.add.at(grad, a, scale[:, None] * (uap - uan))
    np.add.at(grad, p, -scale[:, None] * uap)
    np.add.at(grad, m, scale[:, None] * uan)
    return loss, grad


def mining_loss(
    batch_embeddings: np.ndarray, labels: np.ndarray, margin: float, mining: str
) -> tuple[float, np.ndarray]:
    if mining == "hard":
        return triplet_loss(batch_embeddings, labels, margin)
    if mining == "batch_hard":
        return batch_hard_loss(batch_embeddings, labels, margin)
    raise ConfigError(f"mining must be one of {MINING_MODES}")


def hinge_boundary_gap(batch_embeddings: np.ndarray, labels: np.ndarray) -> float:
    """Smallest |d(a,n) - d(a,p)| over candidate triplets.

    Mining membership flips exactly when this hits zero, so finite-difference
    checks want it comfortably positive.
    """
    labels = np.asarray(labels)
    d = pairwise_distances(batch_embeddings)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask[:, :, None] & neg_mask[:, None, :]
    if not valid.any():
        return math.inf
    gaps = np.abs(d[:, None, :] - d[:, :, None])
    return float(gaps[valid].min())


def _normalize_backward(u: np.ndarray, de: np.ndarray) -> np.ndarray:
    """Backprop through row normalization e = u / ||u||."""
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    e = u / norms
    return (de - np.sum(de * e, axis=-1, keepdims=True) * e) / norms


def _batch_loss_and_grads(
    head: EmbeddingHead,
    backbone: Backbone,
    feats: np.ndarray,
    cache: Stage2Cache | None,
    labels: np.ndarray,
    margin: float,
    want_backbone_grad: bool,
    mining: str = "hard",
):
    u = feats @ head.weight + head.bias
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateEmbeddingError("pre-normalization vector is exactly zero")
    e = u / norms
    loss, de = mining_loss(e, labels, margin, mining)
    du = _normalize_backward(u, de)
    dw = feats.T @ du
    db = du.sum(axis=0)
    dconv = None
    if want_backbone_grad:
        dfeats = du @ head.weight.T
        dconv = features.stage2_backward(backbone, cache, dfeats)
    return loss, dw, db, dconv


def train_staged(
    split: DatasetSplit,
    backbone: Backbone,
    config: TrainConfig,
    augment_params: AugmentParams = AugmentParams(),
) -> TrainResult:
    """Two-stage training with PK-sampled batches.

    Stage 1 updates only the head at stage1_lr; stage 2 also unfreezes the
    featurizer's last convolution bank at stage2_lr. Deterministic for a
    fixed config seed.
    """
    support = split.support
    by_class: dict[int, list[Observation]] = {}
    for obs in support:
        by_class.setdefault(obs.individual_id, []).append(obs)
    classes = sorted(by_class)
    if len(classes) < config.pk_classes:
        raise ConfigError(
            f"support has {len(classes)} classes; PK sampling needs {config.pk_classes}"
        )
    class_arr = np.asarray(classes)

    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    head = init_head(backbone.feature_dim, rng)
    batches_per_epoch = max(1, math.ceil(len(support) / config.batch_size))
    log: list[EpochStats] = []
    epoch_counter = 0

    for stage, n_epochs, lr in (
        (1, config.stage1_epochs, config.stage1_lr),
        (2, config.stage2_epochs, config.stage2_lr),
    ):
        backbone.stage2_trainable = stage == 2
        for _ in range(n_epochs):
            losses = []
            for _ in range(batches_per_epoch):
                picked = rng.choice(class_arr, size=config.pk_classes, replace=False)
                batch_obs: list[Observation] = []
                for cls in picked:
                    group = by_class[int(cls)]
                    take = rng.choice(
                        len(group), size=config.pk_samples, replace=len(group) < config.pk_samples
                    )
                    batch_obs.extend(group[int(j)] for j in take)
                images = np.stack(
                    [
                        features.letterbox(
                            features.augment(obs.image, augment_params, rng),
                            backbone.input_size,
                        )
                        for obs in batch_obs
                    ]
                )
                labels = np.asarray([obs.individual_id for obs in batch_obs])
                feats, cache = features.extract_batch(
                    backbone, images, want_cache=backbone.stage2_trainable
                )
                loss, dw, db, dconv = _batch_loss_and_grads(
                    head, backbone, feats, cache, labels, config.margin,
                    want_backbone_grad=backbone.stage2_trainable,
                    mining=config.mining,
                )
                head.weight -= lr * dw
                head.bias -= lr * db
                if dconv is not None:
                    dw3, db3 = dconv
                    backbone.conv3_w -= lr * dw3
                    backbone.conv3_b -= lr * db3
                losses.append(loss)
            epoch_counter += 1
            log.append(EpochStats(epoch=epoch_counter, stage=stage, mean_loss=float(np.mean(losses))))
    return TrainResult(head=head, backbone=backbone, log=log)


def grad_check(
    head: EmbeddingHead,
    backbone: Backbone,
    images: np.ndarray,
    labels: np.ndarray,
    epsilon: float = 1e-5,
    margin: float = 1.0,
    max_params: int = 250,
    seed: int = 0,
    include_head: bool = True,
    mining: str = "hard",
) -> float:
    """Max relative error between analytic parameter gradients of the
    triplet loss and central finite differences.

    Checks the head and, when stage2_trainable, the last convolution bank.
    Samples a random subset when there are more than max_params trainable
    parameters. Returns 0.0 when nothing is trainable to check.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    labels = np.asarray(labels)
    s1 = features.stage1_forward(backbone, images)

    def loss_at() -> float:
        feats, _ = features.stage2_forward(backbone, s1)
        e = embed_batch(head, feats)
        loss, _ = mining_loss(e, labels, margin, mining)
        return loss

    feats, cache = features.stage2_forward(backbone, s1, want_cache=True)
    _, dw, db, dconv = _batch_loss_and_grads(
        head, backbone, feats, cache, labels, margin,
        want_backbone_grad=backbone.stage2_trainable,
        mining=mining,
    )

    targets: list[tuple[np.ndarray, np.ndarray]] = []
    if include_head:
        targets.append((head.weight, dw))
        targets.append((head.bias, db))
    if backbone.stage2_trainable and dconv is not None:
        targets.append((backbone.conv3_w, dconv[0]))
        targets.append((backbone.conv3_b, dconv[1]))
    if not targets:
        return 0.0

    coords = [(ti, j) for ti, (arr, _) in enumerate(targets) for j in range(arr.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > max_params:
        take = rng.choice(len(coords), size=max_params, replace=False)
        coords = [coords[int(i)] for i in take]

    max_rel = 0.0
    for ti, j in coords:
        arr, analytic = targets[ti]
        flat = arr.reshape(-1)
        orig = flat[j]
        flat[j] = orig + epsilon
        f_plus = loss_at()
        flat[j] = orig - epsilon
        f_minus = loss_at()
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2 * epsilon)
        a = analytic.reshape(-1)[j]
        denom = max(abs(a), abs(numeric))
        if denom < 1e-8:
            continue
        max_rel = max(max_rel, abs(a - numeric) / denom)
    return max_rel
