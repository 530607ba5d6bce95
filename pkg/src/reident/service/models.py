"""Request and response models for the review service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator


class ImagePayload(BaseModel):
    h: int = Field(ge=1)
    w: int = Field(ge=1)
    c: int = 3
    data: list[float]

    @field_validator("data")
    @classmethod
    def _length_matches(cls, v, info):
        h = info.data.get("h")
        w = info.data.get("w")
        c = info.data.get("c")
        if h is not None and w is not None and c is not None and len(v) != h * w * c:
            raise ValueError(f"image data length {len(v)} != h*w*c = {h * w * c}")
        return v


class ObservationIn(BaseModel):
    obs_id: Optional[int] = None
    individual_id: Optional[int] = None
    side: Literal["L", "R"]
    capture_day: int = Field(ge=0)
    image: ImagePayload


class IngestOut(BaseModel):
    obs_id: int
    task_id: str
    gallery_version: int


class CandidateOut(BaseModel):
    rank: int
    obs_id: int
    individual_id: int
    distance: float
    thumbnail: str


class TaskOut(BaseModel):
    task_id: str
    obs_id: int
    status: Literal["pending", "confirmed", "rejected_all"]
    min_distance: float
    is_new_suggested: bool
    threshold: float
    candidates: list[CandidateOut]
    decided_individual_id: Optional[int] = None
    gallery_version: int


class TaskListOut(BaseModel):
    tasks: list[TaskOut]
    gallery_version: int


class DecisionIn(BaseModel):
    action: Literal["confirm", "new_individual", "reject_all"]
    individual_id: Optional[int] = None


class MetricsOut(BaseModel):
    tasks_created: int
    pending_tasks: int
    confirmations: int
    rejections: int
    new_individuals: int
    gallery_size: int
    gallery_version: int


class HealthOut(BaseModel):
    status: str
    version: str
    gallery_version: int
