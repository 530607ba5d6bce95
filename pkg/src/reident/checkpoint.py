"""Binary model container.

Sections are concatenated, each introduced by its ASCII magic:
  REIDHEAD1  u32 F, u32 D, then F*D weight f64 and D bias f64 (little-endian,
             row-major)
  REIDBB2    u32 kh, kw, cin, cout, then conv weights f64 and cout bias f64
  REIDDIR1   u32 F, then F weights f64 and one bias f64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC_HEAD = b"REIDHEAD1"
MAGIC_BACKBONE2 = b"REIDBB2"
MAGIC_DIRECTION = b"REIDDIR1"


@dataclass
class CheckpointBundle:
    head_weight: np.ndarray
    head_bias: np.ndarray
    stage2_weight: np.ndarray | None = None
    stage2_bias: np.ndarray | None = None
    direction_weight: np.ndarray | None = None
    direction_bias: float | None = None


def save_checkpoint(
    path: str | Path,
    head_weight: np.ndarray,
    head_bias: np.ndarray,
    stage2_weight: np.ndarray | None = None,
    stage2_bias: np.ndarray | None = None,
    direction_weight: np.ndarray | None = None,
    direction_bias: float | None = None,
) -> None:
    buf = bytearray()
    f, d = head_weight.shape
    buf += MAGIC_HEAD
    buf += struct.pack("<II", f, d)
    buf += np.ascontiguousarray(head_weight, dtype="<f8").tobytes()
    buf += np.ascontiguousarray(head_bias, dtype="<f8").tobytes()
    if stage2_weight is not None:
        kh, kw, cin, cout = stage2_weight.shape
        buf += MAGIC_BACKBONE2
        buf += struct.pack("<IIII", kh, kw, cin, cout)
        buf += np.ascontiguousarray(stage2_weight, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(stage2_bias, dtype="<f8").tobytes()
    if direction_weight is not None:
        buf += MAGIC_DIRECTION
        buf += struct.pack("<I", direction_weight.shape[0])
        buf += np.ascontiguousarray(direction_weight, dtype="<f8").tobytes()
        buf += struct.pack("<d", float(direction_bias))
    Path(path).write_bytes(bytes(buf))


def _take(buf: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise DataFormatError("checkpoint truncated")
    return buf[pos : pos + n], pos + n


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    buf = Path(path).read_bytes()
    pos = 0
    bundle: CheckpointBundle | None = None
    stage2 = None
    direction = None
    while pos < len(buf):
        if buf.startswith(MAGIC_HEAD, pos):
            pos += len(MAGIC_HEAD)
            raw, pos = _take(buf, pos, 8)
            f, d = struct.unpack("<II", raw)
            raw, pos = _take(buf, pos, 8 * f * d)
            weight = np.frombuffer(raw, dtype="<f8").reshape(f, d).copy()
            raw, pos = _take(buf, pos, 8 * d)
            bias = np.frombuffer(raw, dtype="<f8").copy()
            bundle = CheckpointBundle(head_weight=weight, head_bias=bias)
        elif buf.startswith(MAGIC_BACKBONE2, pos):
            pos += len(MAGIC_BACKBONE2)
            raw, pos = _take(buf, pos, 16)
            kh, kw, cin, cout = struct.unpack("<IIII", raw)
            raw, pos = _take(buf, pos, 8 * kh * kw * cin * cout)
            w = np.frombuffer(raw, dtype="<f8").reshape(kh, kw, cin, cout).copy()
            raw, pos = _take(buf, pos, 8 * cout)
            b = np.frombuffer(raw, dtype="<f8").copy()
            stage2 = (w, b)
        elif buf.startswith(MAGIC_DIRECTION, pos):
            pos += len(MAGIC_DIRECTION)
            raw, pos = _take(buf, pos, 4)
            (f,) = struct.unpack("<I", raw)
            raw, pos = _take(buf, pos, 8 * f)
            w = np.frombuffer(raw, dtype="<f8").copy()
            raw, pos = _take(buf, pos, 8)
            (b,) = struct.unpack("<d", raw)
            direction = (w, b)
        else:
            raise DataFormatError(f"unknown checkpoint section at byte {pos}")
    if bundle is None:
        raise DataFormatError("checkpoint has no embedding head section")
    if stage2 is not None:
        bundle.stage2_weight, bundle.stage2_bias = stage2
    if direction is not None:
        bundle.direction_weight, bundle.direction_bias = direction
    return bundle
