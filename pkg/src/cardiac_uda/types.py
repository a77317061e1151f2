"""Shared value types: images, masks, probability maps, domain tags, loss weights."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields
from typing import Optional, Tuple

import numpy as np

NUM_CLASSES = 4
CLASS_NAMES = ("background", "LV", "RV", "Myo")
FOREGROUND = (1, 2, 3)
MIN_SIZE = 16


class InvalidInputError(ValueError):
    """Raised when an input violates a value-type invariant."""


class ConfigError(ValueError):
    """Raised when a configuration cannot produce a valid model or run."""


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class GrayImage:
    pixels: np.ndarray
    spacing: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise InvalidInputError(f"image must be 2D, got shape {px.shape}")
        if min(px.shape) < MIN_SIZE:
            raise InvalidInputError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise InvalidInputError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise InvalidInputError("image intensities must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape

    @classmethod
    def from_raw(cls, raw, spacing=None) -> "GrayImage":
        """Min-max normalize an arbitrary real array into [0, 1]."""
        raw = np.asarray(raw, dtype=np.float64)
        lo, hi = float(raw.min()), float(raw.max())
        if hi > lo:
            raw = (raw - lo) / (hi - lo)
        else:
            raw = np.zeros_like(raw)
        return cls(raw.astype(np.float32), spacing)


@dataclass(frozen=True)
class ClassMask:
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise InvalidInputError(f"mask must be 2D, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            if not np.all(np.equal(np.mod(lab, 1), 0)):
                raise InvalidInputError("mask labels must be integers")
        lab = lab.astype(np.int64)
        if lab.size and (lab.min() < 0 or lab.max() >= NUM_CLASSES):
            bad = sorted(set(np.unique(lab).tolist()) - set(range(NUM_CLASSES)))
            raise InvalidInputError(f"mask labels outside 0..{NUM_CLASSES - 1}: {bad}")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self):
        return self.labels.shape


@dataclass(frozen=True)
class LossWeights:
    """Weights of the full objective. Defaults are the published settings."""

    lambda_ce: float = 0.5
    lambda_jac: float = 0.5
    lambda_Df: float = 1.0
    lambda_Gf: float = 0.05
    lambda_Dm: float = 1.0
    lambda_Gm: float = 0.005

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise InvalidInputError(f"{f.name} must be finite and >= 0, got {v}")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def one_hot(mask, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Expand an integer label map [H, W] into a binary array [C, H, W]."""
    labels = np.asarray(mask.labels if isinstance(mask, ClassMask) else mask)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidInputError(f"label >= num_classes ({num_classes}) or negative")
    out = np.zeros((num_classes,) + labels.shape, dtype=np.float32)
    for c in range(num_classes):
        out[c] = labels == c
    return out


def argmax_decode(probs) -> ClassMask:
    """Pick the highest channel per pixel; ties resolve to the lower class index."""
    p = np.asarray(probs)
    if p.ndim != 3 or p.shape[0] != NUM_CLASSES:
        raise InvalidInputError(f"expected [{NUM_CLASSES}, H, W] probabilities, got {p.shape}")
    if np.isnan(p).any():
        raise InvalidInputError("probability map contains NaN")
    # np.argmax returns the first maximal index
    return ClassMask(np.argmax(p, axis=0))
