"""Synthetic two-domain cardiac phantoms and manifest-driven slice ingestion."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .types import ClassMask, ConfigError, Domain, GrayImage, InvalidInputError, NUM_CLASSES

MAX_RETRIES = 20
MIN_CLASS_PIXELS = 10
CENTER_JITTER = 0.08
RV_RADIUS = 0.6
RV_OFFSET = 0.3


def _heart_extent(epi, rv_scale):
    """Farthest heart pixel from the LV centre, in the units of ``epi``."""
    return epi + (1 + RV_OFFSET) * RV_RADIUS * rv_scale * epi


class Style(str, enum.Enum):
    A = "A"  # bSSFP-like: bright blood pool, dark myocardium, sharp edges
    B = "B"  # T2-like: edema contrast, myocardium close to surrounding tissue
    C = "C"  # LGE-like: raised floor, compressed blood/tissue contrast, enhancing fat


# region intensities: air, body tissue, organ blob, LV pool, RV pool, myocardium, fat
_INTENSITY = {
    Style.A: dict(air=0.03, tissue=0.38, organ=0.50, lv=0.90, rv=0.87, myo=0.16, fat=0.62),
    Style.B: dict(air=0.06, tissue=0.46, organ=0.30, lv=0.72, rv=0.68, myo=0.34, fat=0.55),
    Style.C: dict(air=0.33, tissue=0.55, organ=0.62, lv=0.68, rv=0.62, myo=0.42, fat=0.92),
}
_BLUR = {Style.A: 0.0, Style.B: 0.6, Style.C: 0.9}


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 96
    lv_radius_range: Tuple[float, float] = (0.08, 0.12)
    myo_thickness_range: Tuple[float, float] = (0.035, 0.05)
    rv_scale_range: Tuple[float, float] = (1.0, 1.4)
    domain_style: Style = Style.A
    noise_sigma: float = 0.03
    bias_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ConfigError("phantom image_size must be >= 32")
        if self.noise_sigma < 0 or self.bias_amplitude < 0:
            raise ConfigError("noise_sigma and bias_amplitude must be >= 0")
        for name in ("lv_radius_range", "myo_thickness_range", "rv_scale_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        lv, th, rv = self.lv_radius_range[1], self.myo_thickness_range[1], self.rv_scale_range[1]
        if _heart_extent(lv + th, rv) + CENTER_JITTER > 0.48:
            raise ConfigError("geometry ranges do not fit inside the image")
        object.__setattr__(self, "domain_style", Style(self.domain_style))


@dataclass(frozen=True)
class LabeledSlice:
    image: GrayImage
    mask: ClassMask
    domain: Domain
    style: Optional[str] = None
    sample_id: str = ""


@dataclass(frozen=True)
class UnlabeledSlice:
    image: GrayImage
    domain: Domain
    style: Optional[str] = None
    sample_id: str = ""


@dataclass
class DatasetSplit:
    source_labeled: List[LabeledSlice]
    target_unlabeled: List[UnlabeledSlice]
    target_heldout_labeled: List[LabeledSlice]
    # source-style slices for checking the backbone without any domain gap
    source_heldout_labeled: List[LabeledSlice] = field(default_factory=list)

    def validate(self):
        if not self.source_labeled or not self.target_unlabeled:
            raise InvalidInputError("source and target training splits must be non-empty")
        ids = [s.sample_id for s in self.source_labeled + self.target_unlabeled
               + self.target_heldout_labeled + self.source_heldout_labeled if s.sample_id]
        if len(ids) != len(set(ids)):
            raise InvalidInputError("a sample id appears in more than one split")


def _geometry(spec: PhantomSpec, rng: np.random.Generator):
    n = spec.image_size
    lv = rng.uniform(*spec.lv_radius_range) * n
    th = rng.uniform(*spec.myo_thickness_range) * n
    rv_scale = rng.uniform(*spec.rv_scale_range)
    epi = lv + th
    cy, cx = (0.5 + rng.uniform(-CENTER_JITTER, CENTER_JITTER, size=2)) * n
    # RV sits on the patient's right, roughly opposite the lateral wall
    angle = np.pi + rng.uniform(-0.6, 0.6)
    rv_r = RV_RADIUS * rv_scale * epi
    rv_off = epi + RV_OFFSET * rv_r
    return dict(
        cy=cy, cx=cx, lv=lv, th=th, rv_r=rv_r,
        rv_cy=cy + rv_off * np.sin(angle), rv_cx=cx + rv_off * np.cos(angle),
        body_ry=rng.uniform(0.38, 0.46) * n, body_rx=rng.uniform(0.40, 0.47) * n,
        organ=(rng.uniform(0.25, 0.75) * n, rng.uniform(0.6, 0.8) * n, rng.uniform(0.06, 0.1) * n),
        fat_angle=rng.uniform(0, 2 * np.pi),
    )


def _masks(spec: PhantomSpec, g):
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    d_lv = np.hypot(yy - g["cy"], xx - g["cx"])
    d_rv = np.hypot(yy - g["rv_cy"], xx - g["rv_cx"])
    c = n / 2
    body = ((yy - c) / g["body_ry"]) ** 2 + ((xx - c) / g["body_rx"]) ** 2 <= 1.0
    oy, ox, orad = g["organ"]
    organ = body & (np.hypot(yy - oy, xx - ox) <= orad)
    labels = np.zeros((n, n), dtype=np.int64)
    epi = g["lv"] + g["th"]
    labels[(d_rv <= g["rv_r"]) & (d_lv > epi + 1.0)] = 2
    labels[d_lv <= epi] = 3
    labels[d_lv <= g["lv"]] = 1
    # pericardial fat: thin arc just outside the epicardium, background class
    ang = np.arctan2(yy - g["cy"], xx - g["cx"])
    arc = np.abs(np.angle(np.exp(1j * (ang - g["fat_angle"])))) < 0.9
    fat = (d_lv > epi + 1.0) & (d_lv <= epi + 3.0) & arc & (labels == 0)
    return labels, body, organ & (labels == 0) & ~fat, fat


def _smooth(img, sigma):
    if sigma <= 0:
        return img
    from scipy.ndimage import gaussian_filter
    return gaussian_filter(img, sigma)


def generate_phantom(spec: PhantomSpec) -> Tuple[GrayImage, ClassMask]:
    """Render one phantom; geometry depends only on ``spec.seed``, appearance on the style too."""
    geo_rng = np.random.default_rng([spec.seed, 0])
    for _ in range(MAX_RETRIES):
        g = _geometry(spec, geo_rng)
        if g["th"] <= 0:
            continue
        labels, body, organ, fat = _masks(spec, g)
        counts = np.bincount(labels.ravel(), minlength=NUM_CLASSES)
        if counts.min() >= MIN_CLASS_PIXELS:
            break
    else:
        raise InvalidInputError(f"could not sample valid geometry for seed {spec.seed}")

    style = spec.domain_style
    app_rng = np.random.default_rng([spec.seed, 1, "ABC".index(style.value)])
    tone = _INTENSITY[style]
    img = np.full(labels.shape, tone["air"])
    img[body] = tone["tissue"]
    img[organ] = tone["organ"]
    img[fat] = tone["fat"]
    img[labels == 1] = tone["lv"]
    img[labels == 2] = tone["rv"]
    img[labels == 3] = tone["myo"]
    img = _smooth(img, _BLUR[style])

    n = spec.image_size
    if spec.bias_amplitude > 0:
        yy, xx = np.mgrid[0:n, 0:n] / n - 0.5
        a, b, c = app_rng.uniform(-1, 1, size=3)
        field_ = a * yy + b * xx + c * (yy * xx * 4)
        field_ = spec.bias_amplitude * field_ / max(np.abs(field_).max(), 1e-12)
        img = img + field_
    if spec.noise_sigma > 0:
        img = img + app_rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return GrayImage(img), ClassMask(labels)


def _sample_seed(seed: int, split_code: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, split_code, index]).generate_state(1)[0])


def make_splits(n_source: int, n_target: int, n_heldout: int, seed: int,
                spec: PhantomSpec = None, n_source_heldout: int = None) -> DatasetSplit:
    """Source alternates styles A and B, target and held-out use style C."""
    for name, n in (("n_source", n_source), ("n_target", n_target), ("n_heldout", n_heldout)):
        if n < 1:
            raise InvalidInputError(f"{name} must be >= 1")
    spec = spec or PhantomSpec()
    if n_source_heldout is None:
        n_source_heldout = n_heldout

    def render(code, i, style):
        return generate_phantom(replace(spec, seed=_sample_seed(seed, code, i), domain_style=style))

    source = []
    for i in range(n_source):
        style = Style.A if i % 2 == 0 else Style.B
        img, mask = render(0, i, style)
        source.append(LabeledSlice(img, mask, Domain.SOURCE, style.value, f"source-{i:04d}"))
    target = []
    for i in range(n_target):
        img, _ = render(1, i, Style.C)
        target.append(UnlabeledSlice(img, Domain.TARGET, Style.C.value, f"target-{i:04d}"))
    heldout = []
    for i in range(n_heldout):
        img, mask = render(2, i, Style.C)
        heldout.append(LabeledSlice(img, mask, Domain.TARGET, Style.C.value, f"heldout-{i:04d}"))
    source_heldout = []
    for i in range(n_source_heldout):
        style = Style.A if i % 2 == 0 else Style.B
        img, mask = render(3, i, style)
        source_heldout.append(LabeledSlice(img, mask, Domain.SOURCE, style.value, f"srcheld-{i:04d}"))
    split = DatasetSplit(source, target, heldout, source_heldout)
    split.validate()
    return split


# ---------------------------------------------------------------- ingestion

MANIFEST_FIELDS = ("image_path", "mask_path", "domain", "sample_id", "style")


def _read_raster(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    from PIL import Image
    with Image.open(path) as im:
        return np.array(im)


def _normalize(raw: np.ndarray, mode: str) -> np.ndarray:
    if mode == "dtype" and np.issubdtype(raw.dtype, np.integer):
        return raw.astype(np.float64) / np.iinfo(raw.dtype).max
    raw = raw.astype(np.float64)
    lo, hi = raw.min(), raw.max()
    return (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)


def load_slice_stack(manifest_path, normalize: str = "minmax"):
    """Load slices listed in a CSV manifest.

    Paths are resolved relative to the manifest. Rows with a ``mask_path`` yield
    ``LabeledSlice``; rows without one yield ``UnlabeledSlice``. ``normalize`` is
    ``"minmax"`` (per slice) or ``"dtype"`` (integer rasters divided by their dtype max).
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    if normalize not in ("minmax", "dtype"):
        raise ConfigError(f"unknown normalization {normalize!r}")
    base = manifest_path.parent
    out = []
    with open(manifest_path, newline="") as fh:
        for row in csv.DictReader(fh):
            img_path = base / row["image_path"]
            raw = _read_raster(img_path)
            if raw.ndim != 2:
                raise InvalidInputError(f"{img_path}: expected a 2D grayscale image, got shape {raw.shape}")
            image = GrayImage(_normalize(raw, normalize).astype(np.float32))
            domain = Domain(row.get("domain") or "source")
            sid = row.get("sample_id") or img_path.stem
            style = row.get("style") or None
            mask_rel = row.get("mask_path")
            if mask_rel:
                mask_path = base / mask_rel
                labels = _read_raster(mask_path)
                if labels.shape != raw.shape:
                    raise InvalidInputError(
                        f"{mask_path}: mask shape {labels.shape} does not match image shape {raw.shape}")
                try:
                    mask = ClassMask(labels)
                except InvalidInputError as exc:
                    raise InvalidInputError(f"{mask_path}: {exc}") from None
                out.append(LabeledSlice(image, mask, domain, style, sid))
            else:
                out.append(UnlabeledSlice(image, domain, style, sid))
    return out


def write_slice_stack(slices, directory, manifest_name="manifest.csv", with_masks=True):
    """Write slices as 16-bit image PNGs plus 8-bit label PNGs and a CSV manifest."""
    from PIL import Image
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in slices:
        img16 = np.round(s.image.pixels.astype(np.float64) * 65535).astype(np.uint16)
        img_name = f"{s.sample_id}_img.png"
        Image.fromarray(img16).save(directory / img_name)
        mask_name = ""
        if with_masks and isinstance(s, LabeledSlice):
            mask_name = f"{s.sample_id}_mask.png"
            Image.fromarray(s.mask.labels.astype(np.uint8)).save(directory / mask_name)
        rows.append(dict(image_path=img_name, mask_path=mask_name, domain=s.domain.value,
                         sample_id=s.sample_id, style=s.style or ""))
    with open(directory / manifest_name, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return directory / manifest_name
