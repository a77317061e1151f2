"""Center crop/resize to a square grid and histogram matching to a pooled reference."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .types import ClassMask, ConfigError, GrayImage, InvalidInputError, MIN_SIZE

DEFAULT_BINS = 256


def center_crop_resize(img: GrayImage, target_size, mask: Optional[ClassMask] = None):
    """Scale so the shorter side equals ``target_size``, then crop the centre square.

    The mask, when given, goes through the same geometry with nearest-neighbour
    sampling. Returns the image, or ``(image, mask)`` if a mask was passed.
    """
    if isinstance(target_size, (tuple, list)):
        if len(target_size) != 2 or target_size[0] != target_size[1]:
            raise ConfigError(f"target grid must be square, got {target_size}")
        target_size = target_size[0]
    target_size = int(target_size)
    if target_size < MIN_SIZE:
        raise ConfigError(f"target size must be >= {MIN_SIZE}")
    h, w = img.shape
    if mask is not None and mask.shape != (h, w):
        raise InvalidInputError(f"mask shape {mask.shape} does not match image {img.shape}")

    scale = target_size / min(h, w)
    new_h, new_w = max(target_size, round(h * scale)), max(target_size, round(w * scale))
    pixels = img.pixels
    labels = mask.labels if mask is not None else None
    if (new_h, new_w) != (h, w):
        t = torch.from_numpy(np.array(pixels, dtype=np.float32))[None, None]
        pixels = F.interpolate(t, size=(new_h, new_w), mode="bilinear", align_corners=False,
                               antialias=scale < 1)[0, 0].numpy()
        if labels is not None:
            # nearest sampling at pixel centres, the same grid the bilinear path uses
            rows = np.minimum(((np.arange(new_h) + 0.5) * h / new_h).astype(np.int64), h - 1)
            cols = np.minimum(((np.arange(new_w) + 0.5) * w / new_w).astype(np.int64), w - 1)
            labels = labels[rows][:, cols]
    top = (new_h - target_size) // 2
    left = (new_w - target_size) // 2
    pixels = np.clip(pixels[top:top + target_size, left:left + target_size], 0.0, 1.0)
    out = GrayImage(pixels.astype(np.float32), img.spacing)
    if mask is None:
        return out
    return out, ClassMask(labels[top:top + target_size, left:left + target_size])


@dataclass(frozen=True)
class HistogramReference:
    """Binned intensity distribution on [0, 1]: ``edges`` (K+1) and cumulative mass ``cdf`` (K+1, from 0 to 1)."""

    edges: np.ndarray
    cdf: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        cdf = np.asarray(self.cdf, dtype=np.float64)
        if edges.shape != cdf.shape or edges.ndim != 1 or len(edges) < 2:
            raise InvalidInputError("edges and cdf must be 1D arrays of equal length >= 2")
        if np.any(np.diff(cdf) < 0) or np.any(np.diff(edges) <= 0):
            raise InvalidInputError("cdf must be non-decreasing and edges strictly increasing")
        if cdf[0] != 0.0 or not np.isclose(cdf[-1], 1.0):
            raise InvalidInputError("cdf must run from 0 to 1")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "cdf", cdf)

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    def quantile(self, q):
        """Inverse cdf, linear inside each bin, zero-mass bins skipped."""
        q = np.clip(np.asarray(q, dtype=np.float64), 0.0, 1.0)
        cdf, edges = self.cdf, self.edges
        # first right edge whose cumulative mass reaches q
        idx = np.searchsorted(cdf[1:], q, side="left")
        idx = np.minimum(idx, len(cdf) - 2)
        lo, hi = cdf[idx], cdf[idx + 1]
        mass = hi - lo
        frac = np.where(mass > 0, (q - lo) / np.where(mass > 0, mass, 1.0), 0.0)
        return edges[idx] + np.clip(frac, 0.0, 1.0) * (edges[idx + 1] - edges[idx])

    def evaluate(self, v):
        """Cdf at intensity ``v``, linear inside each bin."""
        return np.interp(np.asarray(v, dtype=np.float64), self.edges, self.cdf)

    def median(self) -> float:
        return float(self.quantile(0.5))

    def to_array(self) -> np.ndarray:
        return np.stack([self.edges, self.cdf])

    @classmethod
    def from_array(cls, arr) -> "HistogramReference":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[0], arr[1])

    def save(self, path):
        """Two-line text record: bin edges, then cumulative mass."""
        np.savetxt(path, self.to_array(), fmt="%.17g")

    @classmethod
    def load(cls, path) -> "HistogramReference":
        return cls.from_array(np.loadtxt(path, ndmin=2))


def _pixels(img) -> np.ndarray:
    return np.asarray(img.pixels if isinstance(img, GrayImage) else img, dtype=np.float64)


def histogram_of(values, bins: int = DEFAULT_BINS) -> HistogramReference:
    values = np.asarray(values, dtype=np.float64).ravel()
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(values, 0.0, 1.0), bins=edges)
    cdf = np.concatenate([[0.0], np.cumsum(counts) / counts.sum()])
    cdf[-1] = 1.0
    return HistogramReference(edges, cdf)


def build_reference(images: Iterable, bins: int = DEFAULT_BINS) -> HistogramReference:
    """Pool the pixels of all ``images`` into one reference distribution."""
    arrays = [_pixels(im).ravel() for im in images]
    if not arrays:
        raise InvalidInputError("cannot build a histogram reference from an empty list")
    return histogram_of(np.concatenate(arrays), bins)


def histogram_match(img, ref: HistogramReference) -> GrayImage:
    """Quantile mapping ``ref^-1(F_img(v))`` with the image's own binned cdf.

    A constant image has no usable cdf and is mapped to the reference median.
    """
    px = _pixels(img)
    if px.max() == px.min():
        out = np.full(px.shape, ref.median())
    else:
        own = histogram_of(px, bins=len(ref.edges) - 1)
        out = ref.quantile(own.evaluate(px))
    return GrayImage(np.clip(out, 0.0, 1.0).astype(np.float32))


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic between pooled pixel populations."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_to_reference(values, ref: HistogramReference) -> float:
    """KS statistic between an empirical sample and a reference cdf."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    f = ref.evaluate(v)
    upper = np.arange(1, n + 1) / n
    lower = np.arange(0, n) / n
    return float(max(np.max(upper - f), np.max(f - lower)))


def preprocess_slices(slices, size: int, reference: Optional[HistogramReference] = None):
    """Apply crop/resize and, when a reference is given, histogram matching to slice records."""
    from dataclasses import replace
    from .phantom import LabeledSlice

    out = []
    for s in slices:
        if isinstance(s, LabeledSlice):
            img, mask = center_crop_resize(s.image, size, s.mask)
        else:
            img, mask = center_crop_resize(s.image, size), None
        if reference is not None:
            img = histogram_match(img, reference)
        out.append(replace(s, image=img, mask=mask) if mask is not None else replace(s, image=img))
    return out


def save_reference(ref: HistogramReference, directory) -> Path:
    path = Path(directory) / "histogram_reference.txt"
    ref.save(path)
    return path
