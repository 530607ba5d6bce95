"""Synthetic mark-recapture photo dataset.

Generates a population of individuals, each with a persistent head pattern
drawn from a latent vector, then renders repeat capture events across days.
Every capture event is photographed from both sides; the right-side frame is
the horizontal mirror of the left-side frame before per-capture noise.
Images are HSV tensors: hue in [0, 360), saturation and value in [0, 100].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DataFormatError

HUE_MAX = 360.0
SAT_MAX = 100.0
VAL_MAX = 100.0

LATENT_DIM = 16

# Pattern geometry, in [-1, 1] image coordinates of the canonical left view.
HEAD_ANCHOR = (-0.45, 0.0)
N_PATTERN_BLOBS = 6
_PARAMS_PER_BLOB = 9
_N_BACKGROUND_PARAMS = 3

# Fixed mixing matrices so blob parameters vary continuously with the latent
# and are identical across processes.
_mix_rng = np.random.default_rng(np.random.SeedSequence(0x7E1D))
_PARAM_MIX = _mix_rng.standard_normal(
    (N_PATTERN_BLOBS * _PARAMS_PER_BLOB + _N_BACKGROUND_PARAMS, LATENT_DIM)
) / math.sqrt(LATENT_DIM)
_DRIFT_MIX = _mix_rng.standard_normal((LATENT_DIM, LATENT_DIM)) / math.sqrt(LATENT_DIM)
del _mix_rng


class Side(str, Enum):
    LEFT = "L"
    RIGHT = "R"


@dataclass
class IndividualSpec:
    individual_id: int
    pattern_latent: np.ndarray  # (LATENT_DIM,)
    growth_rate: float  # relative scale change per 100 days
    drift_rate: float  # latent perturbation per 100 days

    def validate(self) -> None:
        if self.growth_rate < 0:
            raise ValueError("growth_rate must be >= 0")
        if not np.all(np.isfinite(self.pattern_latent)):
            raise ValueError("pattern_latent must be finite")


@dataclass
class Observation:
    obs_id: int
    individual_id: int
    side: Side
    capture_day: int
    image: np.ndarray  # (H, W, 3) float64 HSV


@dataclass
class DatasetSplit:
    support: list[Observation]
    query: list[Observation]
    split_fraction: float = 0.3


@dataclass(frozen=True)
class RenderConfig:
    """Per-capture nuisance settings. Amplitudes of zero disable the draw."""

    image_size: tuple[int, int] = (64, 64)
    clutter_blobs: int = 3
    clutter_amp: float = 2.0
    lighting_gain: tuple[float, float] = (0.78, 1.09)
    lighting_offset: float = 7.0
    hue_jitter: float = 6.0
    sat_jitter: float = 0.0
    noise_std: float = 1.5

    @classmethod
    def noiseless(cls, image_size: tuple[int, int] = (64, 64)) -> "RenderConfig":
        return cls(
            image_size=image_size,
            clutter_amp=0.0,
            lighting_gain=(1.0, 1.0),
            lighting_offset=0.0,
            hue_jitter=0.0,
            sat_jitter=0.0,
            noise_std=0.0,
        )

    @property
    def has_capture_noise(self) -> bool:
        return (
            self.clutter_amp > 0
            or self.lighting_gain != (1.0, 1.0)
            or self.lighting_offset > 0
            or self.hue_jitter > 0
            or self.sat_jitter > 0
            or self.noise_std > 0
        )


def _blob_params(latent_eff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map an (effective) latent to blob and background parameters.

    Everything is a squashed linear mix of the latent, so a small latent
    perturbation moves the pattern a little instead of replacing it.
    """
    v = _PARAM_MIX @ latent_eff
    blobs = v[: N_PATTERN_BLOBS * _PARAMS_PER_BLOB].reshape(
        N_PATTERN_BLOBS, _PARAMS_PER_BLOB
    )
    t = np.tanh(blobs)
    params = np.empty_like(t)
    params[:, 0] = HEAD_ANCHOR[0] + 0.18 * t[:, 0]  # cx
    params[:, 1] = HEAD_ANCHOR[1] + 0.45 * t[:, 1]  # cy
    params[:, 2] = 0.06 + 0.03 * t[:, 2]  # radius
    params[:, 3] = 130.0 * t[:, 3]  # hue amplitude
    params[:, 4] = 30.0 * t[:, 4]  # saturation amplitude
    params[:, 5] = 32.0 * t[:, 5]  # value amplitude
    params[:, 6] = 18.0 + 8.0 * t[:, 6]  # stripe frequency
    params[:, 7] = math.pi * t[:, 7]  # stripe angle
    params[:, 8] = math.pi * t[:, 8]  # stripe phase
    bg_raw = np.tanh(v[N_PATTERN_BLOBS * _PARAMS_PER_BLOB:])
    background = np.array(
        [205.0 + 10.0 * bg_raw[0], 42.0 + 8.0 * bg_raw[1], 58.0 + 8.0 * bg_raw[2]]
    )
    return params, background


def _coordinate_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys = np.linspace(-1.0, 1.0, h)
    xs = np.linspace(-1.0, 1.0, w)
    return np.meshgrid(xs, ys)  # xx, yy with shape (h, w)


def render_observation(
    spec: IndividualSpec,
    side: Side,
    capture_day: int,
    rng: np.random.Generator,
    cfg: RenderConfig = RenderConfig(),
) -> Observation:
    """Render one capture frame for an individual.

    The pattern is a deterministic function of (pattern_latent, side,
    capture_day); the rng only feeds per-capture noise. Pattern scale grows
    with capture_day * growth_rate about the head anchor, and the latent
    drifts along a fixed direction with capture_day * drift_rate.
    """
    spec.validate()
    if capture_day < 0:
        raise ValueError("capture_day must be >= 0")
    h, w = cfg.image_size
    if h < 1 or w < 1:
        raise ValueError("image size must be positive")

    drift_dir = _DRIFT_MIX @ spec.pattern_latent
    norm = np.linalg.norm(drift_dir)
    if norm > 0:
        drift_dir = drift_dir / norm
    latent_eff = spec.pattern_latent + (spec.drift_rate * capture_day / 100.0) * drift_dir
    blobs, background = _blob_params(latent_eff)

    xx, yy = _coordinate_grid(h, w)
    # Growth enlarges the pattern: evaluate it at coordinates shrunk toward
    # the head anchor.
    gamma = 1.0 + spec.growth_rate * capture_day / 100.0
    hx, hy = HEAD_ANCHOR
    px = (xx - hx) / gamma + hx
    py = (yy - hy) / gamma + hy

    hue = np.full((h, w), background[0])
    sat = np.full((h, w), background[1])
    val = np.full((h, w), background[2])
    for cx, cy, radius, hue_amp, sat_amp, val_amp, freq, ang, phase in blobs:
        dx = px - cx
        dy = py - cy
        g = np.exp(-(dx * dx + dy * dy) / (2.0 * radius * radius))
        stripes = np.cos(freq * (dx * math.cos(ang) + dy * math.sin(ang)) + phase)
        hue += g * hue_amp * stripes
        sat += g * sat_amp * stripes
        val += g * val_amp * stripes

    if side is Side.RIGHT:
        hue = hue[:, ::-1]
        sat = sat[:, ::-1]
        val = val[:, ::-1]

    # Per-capture noise: body clutter, lighting, global hue jitter, pixel noise.
    if cfg.clutter_amp > 0:
        for _ in range(cfg.clutter_blobs):
            cx = rng.uniform(0.10, 0.70)
            if side is Side.RIGHT:
                cx = -cx
            cy = rng.uniform(-0.55, 0.55)
            radius = rng.uniform(0.12, 0.26)
            val_off = rng.uniform(-1.0, 1.0) * cfg.clutter_amp
            sat_off = rng.uniform(-1.0, 1.0) * cfg.clutter_amp * 0.8
            g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * radius * radius))
            val = val + g * val_off
            sat = sat + g * sat_off
    if cfg.lighting_gain != (1.0, 1.0) or cfg.lighting_offset > 0:
        gain = rng.uniform(*cfg.lighting_gain)
        offset = rng.uniform(-cfg.lighting_offset, cfg.lighting_offset)
        val = val * gain + offset
    if cfg.hue_jitter > 0:
        hue = hue + rng.uniform(-cfg.hue_jitter, cfg.hue_jitter)
    if cfg.sat_jitter > 0:
        sat = sat + rng.uniform(-cfg.sat_jitter, cfg.sat_jitter)
    if cfg.noise_std > 0:
        hue = hue + rng.normal(0.0, 3.6 * cfg.noise_std, size=hue.shape)
        sat = sat + rng.normal(0.0, cfg.noise_std, size=sat.shape)
        val = val + rng.normal(0.0, cfg.noise_std, size=val.shape)

    image = np.stack(
        [
            np.mod(hue, HUE_MAX),
            np.clip(sat, 0.0, SAT_MAX),
            np.clip(val, 0.0, VAL_MAX),
        ],
        axis=-1,
    )
    return Observation(
        obs_id=-1,
        individual_id=spec.individual_id,
        side=side,
        capture_day=capture_day,
        image=image,
    )


def gen_population(
    n_individuals: int,
    mean_obs_per_individual: float,
    day_span: int,
    image_size: tuple[int, int] = (64, 64),
    seed: int = 0,
    render: RenderConfig | None = None,
    growth_range: tuple[float, float] = (0.008, 0.03),
    drift_range: tuple[float, float] = (0.05, 0.15),
) -> list[Observation]:
    """Generate a full synthetic population.

    mean_obs_per_individual counts output observations (frames). Capture
    events per individual are drawn shifted-Poisson with mean
    mean_obs_per_individual / 2 and every event is rendered on both sides,
    so the population frame count lands on the requested mean.
    """
    if n_individuals < 1:
        raise ValueError("n_individuals must be >= 1")
    if mean_obs_per_individual < 1:
        raise ValueError("mean_obs_per_individual must be >= 1")
    if day_span < 0:
        raise ValueError("day_span must be >= 0")
    h, w = image_size
    if h < 1 or w < 1:
        raise ValueError("image size must be positive")
    if render is None:
        render = RenderConfig(image_size=image_size)
    elif render.image_size != image_size:
        render = replace(render, image_size=image_size)

    event_lambda = max(mean_obs_per_individual / 2.0 - 1.0, 0.0)
    children = np.random.SeedSequence(seed).spawn(n_individuals)
    observations: list[Observation] = []
    next_obs_id = 0
    for i in range(n_individuals):
        rng = np.random.default_rng(children[i])
        spec = IndividualSpec(
            individual_id=i,
            pattern_latent=rng.standard_normal(LATENT_DIM),
            growth_rate=rng.uniform(*growth_range),
            drift_rate=rng.uniform(*drift_range),
        )
        n_events = 1 + int(rng.poisson(event_lambda))
        days = np.sort(rng.integers(0, day_span + 1, size=n_events))
        for day in days:
            for side in (Side.LEFT, Side.RIGHT):
                obs = render_observation(spec, side, int(day), rng, render)
                obs.obs_id = next_obs_id
                next_obs_id += 1
                observations.append(obs)
    return observations


def split_dataset(
    observations: list[Observation], fraction: float = 0.3, seed: int = 0
) -> DatasetSplit:
    """Per-individual stratified split into support and query sets.

    Individuals always keep at least one observation in support, so every
    query has a chance of a correct gallery match.
    """
    if not observations:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    by_individual: dict[int, list[Observation]] = {}
    for obs in observations:
        by_individual.setdefault(obs.individual_id, []).append(obs)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    support: list[Observation] = []
    query: list[Observation] = []
    for individual_id in sorted(by_individual):
        group = sorted(by_individual[individual_id], key=lambda o: o.obs_id)
        n = len(group)
        n_query = min(n - 1, int(n * fraction + 0.5))
        order = rng.permutation(n)
        query_idx = set(order[:n_query].tolist())
        for j, obs in enumerate(group):
            (query if j in query_idx else support).append(obs)
    support.sort(key=lambda o: o.obs_id)
    query.sort(key=lambda o: o.obs_id)
    return DatasetSplit(support=support, query=query, split_fraction=fraction)


def write_observations(path: str | Path, observations: list[Observation]) -> None:
    """Write observations.jsonl: one JSON object per line, floats round-trip
    exactly through their text form."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for obs in observations:
            h, w, c = obs.image.shape
            record = {
                "obs_id": obs.obs_id,
                "individual_id": obs.individual_id,
                "side": obs.side.value,
                "capture_day": obs.capture_day,
                "image": {"h": h, "w": w, "c": c, "data": obs.image.reshape(-1).tolist()},
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_observations(path: str | Path) -> list[Observation]:
    path = Path(path)
    observations: list[Observation] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                img = record["image"]
                data = np.asarray(img["data"], dtype=np.float64).reshape(
                    img["h"], img["w"], img["c"]
                )
                observations.append(
                    Observation(
                        obs_id=int(record["obs_id"]),
                        individual_id=int(record["individual_id"]),
                        side=Side(record["side"]),
                        capture_day=int(record["capture_day"]),
                        image=data,
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise DataFormatError(f"{path}:{line_no}: bad observation record: {exc}") from exc
    return observations
