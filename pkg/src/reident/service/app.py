"""FastAPI wiring for the review service."""

from __future__ import annotations

import io

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .. import __version__
from ..datagen import Side
from .models import (
    CandidateOut,
    DecisionIn,
    HealthOut,
    IngestOut,
    MetricsOut,
    ObservationIn,
    TaskListOut,
    TaskOut,
)
from .state import (
    ImageSizeMismatch,
    ReviewService,
    ReviewTask,
    TaskAlreadyDecided,
    TaskNotFound,
    UnknownIndividual,
)


def hsv_to_rgb(image: np.ndarray) -> np.ndarray:
    """HSV (hue 0..360, sat/val 0..100) to uint8 RGB, standard conversion."""
    h = np.mod(image[..., 0], 360.0) / 60.0
    s = np.clip(image[..., 1], 0, 100) / 100.0
    v = np.clip(image[..., 2], 0, 100) / 100.0
    c = v * s
    x = c * (1 - np.abs(np.mod(h, 2) - 1))
    m = v - c
    zeros = np.zeros_like(c)
    sector = np.floor(h).astype(int) % 6
    r = np.choose(sector, [c, x, zeros, zeros, x, c])
    g = np.choose(sector, [x, c, c, x, zeros, zeros])
    b = np.choose(sector, [zeros, zeros, x, c, c, x])
    rgb = np.stack([r + m, g + m, b + m], axis=-1)
    return (np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)


def _task_out(task: ReviewTask, service: ReviewService) -> TaskOut:
    return TaskOut(
        task_id=task.task_id,
        obs_id=task.obs_id,
        status=task.status,
        min_distance=task.min_distance,
        is_new_suggested=task.is_new_suggested,
        threshold=service.config.threshold,
        candidates=[
            CandidateOut(
                rank=c.rank,
                obs_id=c.obs_id,
                individual_id=c.individual_id,
                distance=c.distance,
                thumbnail=f"/thumbnails/{c.obs_id}.png",
            )
            for c in task.candidates
        ],
        decided_individual_id=task.decided_individual_id,
        gallery_version=service.gallery_version,
    )


def create_app(service: ReviewService, cors_origins: list[str] | None = None) -> FastAPI:
    app = FastAPI(title="reident review service", version=__version__)
    app.state.service = service

    app.add_middleware(
        CORSMiddleware,
        allow_origins=cors_origins or ["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.middleware("http")
    async def gallery_version_header(request: Request, call_next):
        response = await call_next(request)
        response.headers["X-Gallery-Version"] = str(service.gallery_version)
        return response

    @app.get("/healthz", response_model=HealthOut)
    def healthz():
        return HealthOut(
            status="ok", version=__version__, gallery_version=service.gallery_version
        )

    @app.post("/observations", response_model=IngestOut)
    def ingest_observation(body: ObservationIn):
        image = np.asarray(body.image.data, dtype=np.float64).reshape(
            body.image.h, body.image.w, body.image.c
        )
        try:
            task = service.ingest(
                image=image,
                side=Side(body.side),
                capture_day=body.capture_day,
                requested_obs_id=body.obs_id,
            )
        except ImageSizeMismatch as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return IngestOut(
            obs_id=task.obs_id,
            task_id=task.task_id,
            gallery_version=service.gallery_version,
        )

    @app.get("/tasks", response_model=TaskListOut)
    def list_tasks():
        return TaskListOut(
            tasks=[_task_out(t, service) for t in service.pending_tasks()],
            gallery_version=service.gallery_version,
        )

    @app.get("/tasks/{task_id}", response_model=TaskOut)
    def get_task(task_id: str):
        try:
            task = service.get_task(task_id)
        except TaskNotFound:
            raise HTTPException(status_code=404, detail="unknown task")
        return _task_out(task, service)

    @app.post("/tasks/{task_id}/decision", response_model=TaskOut)
    def decide(task_id: str, body: DecisionIn):
        try:
            task = service.decide(task_id, body.action, body.individual_id)
        except TaskNotFound:
            raise HTTPException(status_code=404, detail="unknown task")
        except TaskAlreadyDecided:
            raise HTTPException(status_code=409, detail="task already decided")
        except UnknownIndividual as exc:
            raise HTTPException(status_code=400, detail=f"unknown individual_id {exc}")
        return _task_out(task, service)

    @app.get("/metrics", response_model=MetricsOut)
    def metrics():
        return MetricsOut(**service.metrics())

    @app.get("/thumbnails/{obs_id}.png")
    def thumbnail(obs_id: int):
        image = service.images.get(obs_id)
        if image is None:
            raise HTTPException(status_code=404, detail="no image for observation")
        from PIL import Image

        png = io.BytesIO()
        Image.fromarray(hsv_to_rgb(image)).save(png, format="PNG")
        return Response(content=png.getvalue(), media_type="image/png")

    return app
