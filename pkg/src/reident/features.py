"""Preprocessing and the frozen featurizer.

The featurizer is two banks of fixed random 3x3 convolutions (full-wave
rectified, bias-free) over the HSV channels plus two coordinate channels,
followed by a third bank whose rectified responses are globally
average-pooled and log-compressed into the feature vector. Stage 1 (the
first two banks) is always frozen; stage 2 (the last bank) can be marked
trainable so the training loop can unfreeze it in its second stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datagen import HUE_MAX, SAT_MAX, VAL_MAX

FEATURE_DIM = 256

_STAGE1_CH1 = 16
_STAGE1_CH2 = 32
_INPUT_CHANNELS = 5  # h, s, v + x, y coordinate grids
# log1p compression of the pooled responses keeps multiplicative lighting
# changes close to additive in feature space.
_GAP_LOG_SCALE = 4.0
# Amplified coordinate channels double as a spatially varying bias, keeping
# most rectifier units in their locally linear regime.
_COORD_SCALE = 3.0

MIN_INPUT_SIZE = 32


@dataclass(frozen=True)
class AugmentParams:
    hue_sat_delta_max: float = 20.0
    rotation_fraction_max: float = 0.1
    scale_fraction_max: float = 0.1

    def __post_init__(self):
        if min(self.hue_sat_delta_max, self.rotation_fraction_max, self.scale_fraction_max) < 0:
            raise ValueError("augmentation bounds must be >= 0")

    @classmethod
    def none(cls) -> "AugmentParams":
        return cls(0.0, 0.0, 0.0)


@dataclass
class Backbone:
    seed: int
    input_size: int
    feature_dim: int
    conv1_w: np.ndarray  # (3, 3, 5, 16), bias-free
    conv2_w: np.ndarray  # (3, 3, 16, 32), bias-free
    conv3_w: np.ndarray  # (3, 3, 32, feature_dim)
    conv3_b: np.ndarray
    stage2_trainable: bool = False


def build_backbone(seed: int, input_size: int = 64, feature_dim: int = FEATURE_DIM) -> Backbone:
    """Construct the fixed random featurizer for a given seed."""
    if input_size < MIN_INPUT_SIZE:
        raise ValueError(f"input_size must be >= {MIN_INPUT_SIZE}")
    rng = np.random.default_rng(np.random.SeedSequence([0xFEA7, seed]))

    def he(shape):
        fan_in = shape[0] * shape[1] * shape[2]
        return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)

    return Backbone(
        seed=seed,
        input_size=input_size,
        feature_dim=feature_dim,
        conv1_w=he((3, 3, _INPUT_CHANNELS, _STAGE1_CH1)),
        conv2_w=he((3, 3, _STAGE1_CH1, _STAGE1_CH2)),
        conv3_w=he((3, 3, _STAGE1_CH2, feature_dim)),
        conv3_b=rng.standard_normal(feature_dim) * 0.1,
    )


def _bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (H, W, C) with bilinear sampling, align-corners=False convention."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def letterbox(image: np.ndarray, target_size: int) -> np.ndarray:
    """Resize into a target_size square preserving aspect ratio.

    Padding pixels are constant zero (value channel 0).
    """
    if target_size < 1:
        raise ValueError("target_size must be >= 1")
    if image.ndim != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("image must be a nonempty (H, W, C) array")
    h, w = image.shape[:2]
    if h == w == target_size:
        return image.copy()
    scale = min(target_size / h, target_size / w)
    new_h = max(1, round(h * scale))
    new_w = max(1, round(w * scale))
    resized = _bilinear_resize(image, new_h, new_w)
    canvas = np.zeros((target_size, target_size, image.shape[2]), dtype=image.dtype)
    top = (target_size - new_h) // 2
    left = (target_size - new_w) // 2
    canvas[top : top + new_h, left : left + new_w] = resized
    return canvas


def _affine_sample(image: np.ndarray, angle: float, scale: float) -> np.ndarray:
    """Rotate by angle then scale about the image center, bilinear, zero fill."""
    h, w = image.shape[:2]
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    # Inverse map: undo scale, then undo rotation.
    dx = (xx - cx) / scale
    dy = (yy - cy) / scale
    cos_a = math.cos(angle)
    sin_a = math.sin(angle)
    sx = cos_a * dx + sin_a * dy + cx
    sy = -sin_a * dx + cos_a * dy + cy
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (sx - x0)[..., None]
    wy = (sy - y0)[..., None]
    out = (
        image[y0, x0] * (1 - wx) * (1 - wy)
        + image[y0, x1] * wx * (1 - wy)
        + image[y1, x0] * (1 - wx) * wy
        + image[y1, x1] * wx * wy
    )
    out[~inside] = 0.0
    return out


def augment(image: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Training-time augmentation: hue/saturation jitter, rotation, scale.

    Hue wraps mod 360; saturation clamps to [0, 100]. Rotation fraction is a
    fraction of a full turn. Scale is drawn in [1, 1 + scale_fraction_max]
    about the image center. All-zero params return the input unchanged.
    """
    out = image.copy()
    if params.hue_sat_delta_max > 0:
        dh = rng.uniform(-params.hue_sat_delta_max, params.hue_sat_delta_max)
        ds = rng.uniform(-params.hue_sat_delta_max, params.hue_sat_delta_max)
        out[..., 0] = np.mod(out[..., 0] + dh, HUE_MAX)
        out[..., 1] = np.clip(out[..., 1] + ds, 0.0, SAT_MAX)
    angle = 0.0
    scale = 1.0
    if params.rotation_fraction_max > 0:
        angle = rng.uniform(-params.rotation_fraction_max, params.rotation_fraction_max) * 2 * math.pi
    if params.scale_fraction_max > 0:
        scale = rng.uniform(1.0, 1.0 + params.scale_fraction_max)
    if angle != 0.0 or scale != 1.0:
        out = _affine_sample(out, angle, scale)
    return out


def _normalized_input(images: np.ndarray) -> np.ndarray:
    """Scale HSV channels to order one and append coordinate channels."""
    b, h, w = images.shape[:3]
    scaled = images / np.array([HUE_MAX, SAT_MAX, VAL_MAX])
    xx, yy = np.meshgrid(np.linspace(-1, 1, w), np.linspace(-1, 1, h))
    coords = np.broadcast_to(
        np.stack([xx, yy], axis=-1) * _COORD_SCALE, (b, h, w, 2)
    )
    return np.concatenate([scaled, coords], axis=-1)


def _conv_patches(x: np.ndarray) -> np.ndarray:
    """im2col for 3x3 valid convolution: (B,H,W,C) -> (B, H-2, W-2, 9*C)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(1, 2))
    # win: (B, H-2, W-2, C, 3, 3) -> order patch dims as (ky, kx, c)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    b, oh, ow = win.shape[:3]
    return win.reshape(b, oh, ow, -1)


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _conv_patches(x) @ w.reshape(-1, w.shape[-1])


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, : 2 * h2, : 2 * w2].reshape(b, h2, 2, w2, 2, c).mean(axis=(2, 4))


def stage1_forward(backbone: Backbone, images: np.ndarray) -> np.ndarray:
    """Frozen stage: two rectified convolution banks with pooling."""
    x = _normalized_input(images)
    x = _avg_pool2(np.abs(_conv(x, backbone.conv1_w)))
    x = _avg_pool2(np.abs(_conv(x, backbone.conv2_w)))
    return _avg_pool2(x)


@dataclass
class Stage2Cache:
    """Forward intermediates needed for the stage-2 parameter gradient."""

    patches: np.ndarray  # (B, P, 9*C2) flattened conv input windows
    relu_mask: np.ndarray  # (B, P, F)
    pooled: np.ndarray  # (B, F) pre-compression pooled responses
    n_positions: int


def stage2_forward(
    backbone: Backbone, stage1_out: np.ndarray, want_cache: bool = False
) -> tuple[np.ndarray, Stage2Cache | None]:
    patches = _conv_patches(stage1_out)
    b, oh, ow, d = patches.shape
    flat = patches.reshape(b, oh * ow, d)
    z = flat @ backbone.conv3_w.reshape(-1, backbone.feature_dim) + backbone.conv3_b
    pooled = np.maximum(z, 0.0).mean(axis=1)
    feats = np.log1p(_GAP_LOG_SCALE * pooled)
    cache = None
    if want_cache:
        cache = Stage2Cache(patches=flat, relu_mask=(z > 0), pooled=pooled, n_positions=oh * ow)
    return feats, cache


def stage2_backward(
    backbone: Backbone, cache: Stage2Cache, dfeats: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of a scalar loss w.r.t. conv3 weights and bias.

    dfeats: (B, F) gradient w.r.t. the feature vectors.
    """
    dpooled = dfeats * (_GAP_LOG_SCALE / (1.0 + _GAP_LOG_SCALE * cache.pooled))
    dz = (dpooled[:, None, :] / cache.n_positions) * cache.relu_mask
    b, p, d = cache.patches.shape
    dw_flat = cache.patches.reshape(b * p, d).T @ dz.reshape(b * p, -1)
    db = dz.sum(axis=(0, 1))
    return dw_flat.reshape(backbone.conv3_w.shape), db


def extract_batch(
    backbone: Backbone, images: np.ndarray, want_cache: bool = False
) -> tuple[np.ndarray, Stage2Cache | None]:
    """Feature vectors for a batch of letterboxed images: (B, S, S, 3) -> (B, F)."""
    if images.ndim != 4 or images.shape[1] != backbone.input_size or images.shape[2] != backbone.input_size:
        raise ValueError(
            f"expected images of size {backbone.input_size}, got {images.shape}"
        )
    s1 = stage1_forward(backbone, images)
    return stage2_forward(backbone, s1, want_cache=want_cache)


def extract(backbone: Backbone, image: np.ndarray) -> np.ndarray:
    """Feature vector for one letterboxed image: (S, S, 3) -> (F,)."""
    if image.ndim != 3:
        raise ValueError("expected a single (H, W, 3) image")
    feats, _ = extract_batch(backbone, image[None])
    return feats[0]
