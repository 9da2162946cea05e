"""Raw channel normalization and composite image formation.

Depth and infrared arrive as 16-bit intensities. Each is mapped to 8 bits
with a robust window centred on the median of its nonzero pixels and
spanning ``sigma`` median absolute deviations either side. Color is
reduced to luma, and the three 8-bit planes are stacked as
(grayscale, depth, infrared).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mcpad.container import RawFrame
from mcpad.errors import DimensionMismatchError

FULL_SCALE = 2**8 - 1
MAD_FALLBACK = 128
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class MadStats:
    median: float
    mad: float
    nonzero_count: int


@dataclass(frozen=True)
class NormConfig:
    sigma: float = 4.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class CompositeImage:
    """Three 8-bit planes, ordered (grayscale, depth, infrared)."""

    planes: np.ndarray  # (3, H, W) uint8

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[0] != 3:
            raise DimensionMismatchError(f"composite needs 3 planes, got shape {self.planes.shape}")
        if self.planes.dtype != np.uint8:
            raise TypeError(f"composite planes must be uint8, got {self.planes.dtype}")

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def gray(self) -> np.ndarray:
        return self.planes[0]

    @property
    def depth(self) -> np.ndarray:
        return self.planes[1]

    @property
    def infrared(self) -> np.ndarray:
        return self.planes[2]


def _check_channel(ch: np.ndarray) -> np.ndarray:
    ch = np.asarray(ch)
    if ch.ndim != 2 or ch.shape[0] < 1 or ch.shape[1] < 1:
        raise ValueError(f"channel must be a non-empty 2-D array, got shape {ch.shape}")
    return ch


def compute_mad(ch: np.ndarray) -> MadStats:
    """Median and median absolute deviation of the strictly nonzero pixels.

    Zeros mark depth holes and dead pixels and are left out of the
    statistics. An all-zero channel yields ``MadStats(0, 0, 0)``.
    """
    ch = _check_channel(ch)
    v = ch[ch != 0].astype(np.float64)
    if v.size == 0:
        return MadStats(0.0, 0.0, 0)
    med = float(np.median(v))
    mad = float(np.median(np.abs(v - med)))
    return MadStats(med, mad, int(v.size))


def normalize_raw(ch: np.ndarray, stats: MadStats, cfg: NormConfig = NormConfig()) -> np.ndarray:
    """Pre-clamp float image of the MAD window mapping; requires ``stats.mad > 0``."""
    if stats.mad <= 0:
        raise ValueError("MAD window is undefined for a zero MAD")
    half_window = cfg.sigma * stats.mad
    return (np.asarray(ch, dtype=np.float64) - stats.median + half_window) / (2 * half_window) * FULL_SCALE


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def normalize_channel(
    ch: np.ndarray, stats: MadStats | None = None, cfg: NormConfig = NormConfig()
) -> np.ndarray:
    """Map a 16-bit channel to an 8-bit plane.

    Values are clamped to ``[0, 255]`` and then rounded half-up. Zero
    pixels still pass through the mapping. When the MAD is zero the whole
    plane is the mid-scale constant 128.

    Args:
        ch: (H, W) raw intensities.
        stats: Statistics from :func:`compute_mad`; computed here if omitted.
        cfg: Window width in MADs.

    Returns:
        (H, W) uint8 plane.
    """
    ch = _check_channel(ch)
    if stats is None:
        stats = compute_mad(ch)
    if stats.mad == 0:
        return np.full(ch.shape, MAD_FALLBACK, dtype=np.uint8)
    scaled = np.clip(normalize_raw(ch, stats, cfg), 0, FULL_SCALE)
    return round_half_up(scaled).astype(np.uint8)


def to_grayscale(color: np.ndarray) -> np.ndarray:
    """BT.601 luma of an (H, W, 3) RGB image, rounded half-up."""
    color = np.asarray(color)
    if color.ndim != 3 or color.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) RGB, got shape {color.shape}")
    rgb = color.astype(np.float64)
    luma = LUMA_WEIGHTS[0] * rgb[..., 0] + LUMA_WEIGHTS[1] * rgb[..., 1] + LUMA_WEIGHTS[2] * rgb[..., 2]
    return np.clip(round_half_up(luma), 0, FULL_SCALE).astype(np.uint8)


def make_composite(gray: np.ndarray, depth8: np.ndarray, ir8: np.ndarray) -> CompositeImage:
    shapes = {np.shape(gray), np.shape(depth8), np.shape(ir8)}
    if len(shapes) != 1:
        raise DimensionMismatchError(
            f"planes differ in size: gray {np.shape(gray)}, depth {np.shape(depth8)}, ir {np.shape(ir8)}"
        )
    return CompositeImage(np.stack([gray, depth8, ir8]).astype(np.uint8))


def preprocess_frame(frame: RawFrame, cfg: NormConfig = NormConfig()) -> CompositeImage:
    """Full raw-to-composite path for one frame; statistics are per frame."""
    return make_composite(
        to_grayscale(frame.color),
        normalize_channel(frame.depth, cfg=cfg),
        normalize_channel(frame.infrared, cfg=cfg),
    )
