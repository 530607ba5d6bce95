"""Gallery store, nearest-neighbor classification, and retrieval metrics."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import embedding, features
from .datagen import Observation, Side
from .errors import DataFormatError

GALLERY_MAGIC = b"REIDGAL1"


@dataclass
class GalleryEntry:
    obs_id: int
    individual_id: int
    side: Side
    capture_day: int
    embedding: np.ndarray


class Gallery:
    """Immutable-by-convention support set: unit embeddings plus metadata."""

    def __init__(
        self,
        embeddings: np.ndarray,
        obs_ids: np.ndarray,
        individual_ids: np.ndarray,
        sides: np.ndarray,
        days: np.ndarray,
    ):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.obs_ids = np.asarray(obs_ids, dtype=np.int64)
        self.individual_ids = np.asarray(individual_ids, dtype=np.int64)
        self.sides = np.asarray(sides, dtype=np.int64)  # 0 = L, 1 = R
        self.days = np.asarray(days, dtype=np.int64)
        if len(set(self.obs_ids.tolist())) != len(self.obs_ids):
            raise ValueError("gallery obs_ids must be unique")

    def __len__(self) -> int:
        return len(self.obs_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def entry(self, i: int) -> GalleryEntry:
        return GalleryEntry(
            obs_id=int(self.obs_ids[i]),
            individual_id=int(self.individual_ids[i]),
            side=Side.RIGHT if self.sides[i] else Side.LEFT,
            capture_day=int(self.days[i]),
            embedding=self.embeddings[i],
        )

    def known_ids(self) -> set[int]:
        return set(int(i) for i in self.individual_ids)


@dataclass
class RankedItem:
    obs_id: int
    individual_id: int
    distance: float


@dataclass
class RankedList:
    """Distances from one query to every gallery entry, ascending; ties broken
    by obs_id ascending."""

    obs_ids: np.ndarray
    individual_ids: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.obs_ids)

    def __getitem__(self, i: int) -> RankedItem:
        return RankedItem(
            obs_id=int(self.obs_ids[i]),
            individual_id=int(self.individual_ids[i]),
            distance=float(self.distances[i]),
        )

    @property
    def items(self) -> list[RankedItem]:
        return [self[i] for i in range(len(self))]


def build_gallery(
    head: embedding.EmbeddingHead, backbone: features.Backbone, support: list[Observation]
) -> Gallery:
    """Embed every support observation. No augmentation at gallery-build time."""
    if not support:
        raise ValueError("support set is empty")
    images = np.stack(
        [features.letterbox(obs.image, backbone.input_size) for obs in support]
    )
    feats, _ = features.extract_batch(backbone, images)
    emb = embedding.embed_batch(head, feats)
    return Gallery(
        embeddings=emb,
        obs_ids=np.asarray([o.obs_id for o in support]),
        individual_ids=np.asarray([o.individual_id for o in support]),
        sides=np.asarray([1 if o.side is Side.RIGHT else 0 for o in support]),
        days=np.asarray([o.capture_day for o in support]),
    )


def rank(query: np.ndarray, gallery: Gallery) -> RankedList:
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (gallery.dim,):
        raise ValueError(f"query dim {q.shape} does not match gallery dim {gallery.dim}")
    dists = np.linalg.norm(gallery.embeddings - q, axis=1)
    order = np.lexsort((gallery.obs_ids, dists))
    return RankedList(
        obs_ids=gallery.obs_ids[order],
        individual_ids=gallery.individual_ids[order],
        distances=dists[order],
    )


def classify(query: np.ndarray, gallery: Gallery) -> int:
    return int(rank(query, gallery).individual_ids[0])


def accuracy_at_k(results: list[tuple[RankedList, int]], k: int) -> float:
    """Fraction of queries whose true id appears among the first k items."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("results are empty")
    hits = sum(1 for ranked, true_id in results if true_id in ranked.individual_ids[:k])
    return hits / len(results)


def average_precision_at_5(ranked: RankedList, true_id: int) -> float:
    """AP truncated at 5: (1/min(R,5)) * sum of precision at each relevant hit,
    where R is the number of gallery entries of the true class."""
    relevant_total = int(np.sum(ranked.individual_ids == true_id))
    if relevant_total == 0:
        raise ValueError("query class has no gallery entry")
    top = ranked.individual_ids[:5]
    hits = 0
    score = 0.0
    for i, label in enumerate(top, start=1):
        if label == true_id:
            hits += 1
            score += hits / i
    return score / min(relevant_total, 5)


def map_at_5(results: list[tuple[RankedList, int]]) -> float:
    if not results:
        raise ValueError("results are empty")
    return float(np.mean([average_precision_at_5(r, t) for r, t in results]))


def first_hit_ranks(results: list[tuple[RankedList, int]]) -> np.ndarray:
    """1-based rank of the first correct-class item per query; 0 if absent."""
    ranks = []
    for ranked, true_id in results:
        where = np.flatnonzero(ranked.individual_ids == true_id)
        ranks.append(int(where[0]) + 1 if len(where) else 0)
    return np.asarray(ranks)


def accuracy_curve(results: list[tuple[RankedList, int]]) -> list[tuple[int, float]]:
    """accuracy_at_k for every k in 1..|gallery|."""
    if not results:
        raise ValueError("results are empty")
    n_gallery = len(results[0][0])
    ranks = first_hit_ranks(results)
    counts = np.zeros(n_gallery + 1, dtype=np.int64)
    for r in ranks:
        if r > 0:
            counts[r] += 1
    cumulative = np.cumsum(counts)
    return [(k, float(cumulative[k] / len(results))) for k in range(1, n_gallery + 1)]


def write_curve_csv(path: str | Path, curve: list[tuple[int, float]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("k,accuracy\n")
        for k, acc in curve:
            fh.write(f"{k},{acc!r}\n")


def gallery_bytes(gallery: Gallery) -> bytes:
    """gallery.bin image: magic, u32 count, u32 dim, then per entry four u32
    ids (obs, individual, side flag, day) and dim f32 embedding values."""
    buf = bytearray()
    buf += GALLERY_MAGIC
    buf += struct.pack("<II", len(gallery), gallery.dim)
    for i in range(len(gallery)):
        buf += struct.pack(
            "<IIII",
            int(gallery.obs_ids[i]),
            int(gallery.individual_ids[i]),
            int(gallery.sides[i]),
            int(gallery.days[i]),
        )
        buf += gallery.embeddings[i].astype("<f4").tobytes()
    return bytes(buf)


def save_gallery(path: str | Path, gallery: Gallery) -> None:
    Path(path).write_bytes(gallery_bytes(gallery))


def load_gallery(path: str | Path) -> Gallery:
    buf = Path(path).read_bytes()
    if not buf.startswith(GALLERY_MAGIC):
        raise DataFormatError("not a gallery file")
    pos = len(GALLERY_MAGIC)
    count, dim = struct.unpack_from("<II", buf, pos)
    pos += 8
    obs_ids, ids, sides, days = [], [], [], []
    embs = np.empty((count, dim))
    entry_bytes = 16 + 4 * dim
    if len(buf) != pos + count * entry_bytes:
        raise DataFormatError("gallery file truncated")
    for i in range(count):
        o, ind, s, d = struct.unpack_from("<IIII", buf, pos)
        pos += 16
        embs[i] = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += 4 * dim
        obs_ids.append(o)
        ids.append(ind)
        sides.append(s)
        days.append(d)
    return Gallery(embs, np.asarray(obs_ids), np.asarray(ids), np.asarray(sides), np.asarray(days))
