"""Review service state: mutable gallery behind a single-writer lock,
pending tasks, and the decision workflow."""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import embedding, features, retrieval
from ..datagen import Observation, Side
from ..features import Backbone
from ..retrieval import Gallery
from .journal import Journal, replay


class TaskNotFound(KeyError):
    pass


class TaskAlreadyDecided(Exception):
    pass


class UnknownIndividual(ValueError):
    pass


class ImageSizeMismatch(ValueError):
    pass


@dataclass
class Candidate:
    rank: int
    obs_id: int
    individual_id: int
    distance: float


@dataclass
class ReviewTask:
    task_id: str
    obs_id: int
    image: np.ndarray
    emb: np.ndarray
    side: Side
    capture_day: int
    candidates: list[Candidate]
    min_distance: float
    is_new_suggested: bool
    status: str = "pending"
    decided_individual_id: int | None = None


@dataclass
class ServiceConfig:
    threshold: float = 0.820
    top_k: int = 5
    image_size: tuple[int, int] = (64, 64)
    snapshot_every: int = 100
    actor: str = "reviewer"


class ReviewService:
    """Owns the mutable gallery. All mutations serialize through one lock and
    the journal; readers always see a consistent snapshot."""

    def __init__(
        self,
        head: embedding.EmbeddingHead,
        backbone: Backbone,
        gallery: Gallery,
        journal: Journal,
        config: ServiceConfig = ServiceConfig(),
        images: dict[int, np.ndarray] | None = None,
    ):
        self.head = head
        self.backbone = backbone
        self.journal = journal
        self.config = config
        self.images: dict[int, np.ndarray] = dict(images or {})
        self._lock = threading.RLock()
        self.tasks: dict[str, ReviewTask] = {}
        self.task_order: list[str] = []
        self.tasks_created = 0
        self.confirmations = 0
        self.rejections = 0
        self.new_individuals = 0

        # Mutable gallery columns; snapshot + journal suffix is the durable form.
        existing = self.journal.read_all()
        if existing:
            gallery = replay(gallery, existing)
        self._emb: list[np.ndarray] = [e.copy() for e in gallery.embeddings]
        self._obs: list[int] = [int(i) for i in gallery.obs_ids]
        self._ind: list[int] = [int(i) for i in gallery.individual_ids]
        self._sides: list[int] = [int(i) for i in gallery.sides]
        self._days: list[int] = [int(i) for i in gallery.days]
        self.gallery_version = sum(
            1 for r in existing if r["action"] in ("confirm", "new_individual")
        )
        self._applied_seq = existing[-1]["seq"] if existing else 0
        self._gallery_cache: tuple[int, Gallery] | None = None

    def gallery(self) -> Gallery:
        with self._lock:
            if self._gallery_cache and self._gallery_cache[0] == self.gallery_version:
                return self._gallery_cache[1]
            g = Gallery(
                np.stack(self._emb),
                np.asarray(self._obs, dtype=np.int64),
                np.asarray(self._ind, dtype=np.int64),
                np.asarray(self._sides, dtype=np.int64),
                np.asarray(self._days, dtype=np.int64),
            )
            self._gallery_cache = (self.gallery_version, g)
            return g

    def gallery_size(self) -> int:
        with self._lock:
            return len(self._obs)

    def known_ids(self) -> set[int]:
        with self._lock:
            return set(self._ind)

    def _allocate_obs_id(self, requested: int | None) -> int:
        taken = set(self._obs) | {t.obs_id for t in self.tasks.values()} | set(self.images)
        if requested is not None and requested not in taken:
            return requested
        return max(taken, default=-1) + 1

    def embed_observation(self, image: np.ndarray) -> np.ndarray:
        boxed = features.letterbox(image, self.backbone.input_size)
        feats = features.extract(self.backbone, boxed)
        return embedding.embed(self.head, feats)

    def ingest(
        self,
        image: np.ndarray,
        side: Side,
        capture_day: int,
        requested_obs_id: int | None = None,
    ) -> ReviewTask:
        if image.shape[:2] != tuple(self.config.image_size):
            raise ImageSizeMismatch(
                f"expected {self.config.image_size} image, got {image.shape[:2]}"
            )
        with self._lock:
            emb = self.embed_observation(image)
            ranked = retrieval.rank(emb, self.gallery())
            k = min(self.config.top_k, len(ranked))
            candidates = [
                Candidate(
                    rank=i + 1,
                    obs_id=int(ranked.obs_ids[i]),
                    individual_id=int(ranked.individual_ids[i]),
                    distance=round(float(ranked.distances[i]), 6),
                )
                for i in range(k)
            ]
            min_dist = float(ranked.distances[0])
            obs_id = self._allocate_obs_id(requested_obs_id)
            task = ReviewTask(
                task_id=uuid.uuid4().hex[:12],
                obs_id=obs_id,
                image=image,
                emb=emb,
                side=side,
                capture_day=capture_day,
                candidates=candidates,
                min_distance=round(min_dist, 6),
                is_new_suggested=min_dist > self.config.threshold,
            )
            self.images[obs_id] = image
            self.tasks[task.task_id] = task
            self.task_order.append(task.task_id)
            self.tasks_created += 1
            return task

    def get_task(self, task_id: str) -> ReviewTask:
        with self._lock:
            if task_id not in self.tasks:
                raise TaskNotFound(task_id)
            return self.tasks[task_id]

    def pending_tasks(self) -> list[ReviewTask]:
        with self._lock:
            return [
                self.tasks[tid]
                for tid in self.task_order
                if self.tasks[tid].status == "pending"
            ]

    def _append_gallery_entry(self, task: ReviewTask, individual_id: int, action: str) -> None:
        entry = {
            "obs_id": task.obs_id,
            "individual_id": individual_id,
            "side": task.side.value,
            "capture_day": task.capture_day,
            "embedding": task.emb.tolist(),
        }
        self.journal.append(
            action, self.config.actor, {"task_id": task.task_id, "entry": entry}
        )
        self._emb.append(task.emb.copy())
        self._obs.append(task.obs_id)
        self._ind.append(individual_id)
        self._sides.append(1 if task.side is Side.RIGHT else 0)
        self._days.append(task.capture_day)
        self.gallery_version += 1
        self._applied_seq += 1
        if (
            self.config.snapshot_every > 0
            and self.gallery_version % self.config.snapshot_every == 0
        ):
            self.write_snapshot()

    def decide(self, task_id: str, action: str, individual_id: int | None = None) -> ReviewTask:
        with self._lock:
            task = self.get_task(task_id)
            if task.status != "pending":
                raise TaskAlreadyDecided(task_id)
            if action == "confirm":
                if individual_id is None or individual_id not in self.known_ids():
                    raise UnknownIndividual(str(individual_id))
                self._append_gallery_entry(task, individual_id, "confirm")
                task.status = "confirmed"
                task.decided_individual_id = individual_id
                self.confirmations += 1
            elif action == "new_individual":
                new_id = max(self.known_ids(), default=-1) + 1
                self._append_gallery_entry(task, new_id, "new_individual")
                task.status = "confirmed"
                task.decided_individual_id = new_id
                self.new_individuals += 1
            elif action == "reject_all":
                self.journal.append(
                    "reject_all", self.config.actor, {"task_id": task.task_id}
                )
                self._applied_seq += 1
                task.status = "rejected_all"
                self.rejections += 1
            else:
                raise ValueError(f"unknown action {action!r}")
            return task

    def write_snapshot(self, path: str | Path | None = None) -> None:
        """Periodic gallery.bin snapshot next to the journal."""
        target = Path(path) if path else self.journal.path.with_suffix(".snapshot.bin")
        retrieval.save_gallery(target, self.gallery())

    def gallery_file_bytes(self) -> bytes:
        return retrieval.gallery_bytes(self.gallery())

    def metrics(self) -> dict:
        with self._lock:
            return {
                "tasks_created": self.tasks_created,
                "pending_tasks": len(self.pending_tasks()),
                "confirmations": self.confirmations,
                "rejections": self.rejections,
                "new_individuals": self.new_individuals,
                "gallery_size": self.gallery_size(),
                "gallery_version": self.gallery_version,
            }
