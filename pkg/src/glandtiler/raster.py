"""Slide rasters, patch grids, and slide-level probability maps.

Everything downstream maps back onto a :class:`SlideRaster`. Patch-level
segmenter outputs are stitched into slide-level :class:`ClassProbabilityMap`
planes (mean over overlapping patches, then block-average pooling), fused
across models by per-pixel multiplication, and thresholded into a
:class:`CompartmentMaskSet` whose gland plane is epithelium OR lumen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

STROMA_BACKGROUND = "stroma_background"
EPITHELIUM = "epithelium"
LUMEN = "lumen"
NUCLEI = "nuclei"

SEGMENTATION_CLASSES = (STROMA_BACKGROUND, EPITHELIUM, LUMEN)
KNOWN_CLASSES = (STROMA_BACKGROUND, EPITHELIUM, LUMEN, NUCLEI)

DEFAULT_PATCH_SIZE = 1024
DEFAULT_STRIDE = 768
DEFAULT_THRESHOLD = 0.5


class SlideSmallerThanPatch(ValueError):
    """Slide dimensions cannot accommodate a single patch."""


class MissingPatch(KeyError):
    """A grid origin has no corresponding patch prediction."""


class ShapeMismatch(ValueError):
    """Operands disagree on dimensions, classes, or downsample factor."""


@dataclass(frozen=True)
class SlideRaster:
    """8-bit RGB raster with level-0 (40X) resolution metadata."""

    slide_id: str
    pixels: np.ndarray  # (H, W, 3) uint8
    microns_per_pixel: float | None = None

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError(f"pixels must be (H, W, 3) uint8, got {px.shape} {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("slide must be at least 1x1")

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    def patch(self, x: int, y: int, size: int) -> np.ndarray:
        return self.pixels[y : y + size, x : x + size]


@dataclass(frozen=True)
class PatchGrid:
    """Edge-aligned overlapping patch origins in row-major (y, x) order."""

    patch_size_px: int
    stride_px: int
    origins: tuple[tuple[int, int], ...]  # (x, y) at level 0


def _axis_origins(extent: int, patch: int, stride: int) -> list[int]:
    """Origins 0, stride, 2*stride, ... with the last clamped to extent - patch."""
    last = extent - patch
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def plan_patch_grid(
    width_px: int,
    height_px: int,
    patch_size_px: int = DEFAULT_PATCH_SIZE,
    stride_px: int = DEFAULT_STRIDE,
) -> PatchGrid:
    """Plan a full-coverage patch grid over a slide.

    The stride steps from 0 and the final origin on each axis is clamped to
    ``dim - patch_size`` so edge pixels are always covered.
    """
    if patch_size_px < 1:
        raise ValueError("patch_size_px must be >= 1")
    if not 1 <= stride_px <= patch_size_px:
        raise ValueError("stride_px must satisfy 1 <= stride <= patch_size")
    if width_px < patch_size_px or height_px < patch_size_px:
        raise SlideSmallerThanPatch(
            f"slide {width_px}x{height_px} smaller than patch {patch_size_px}"
        )
    xs = _axis_origins(width_px, patch_size_px, stride_px)
    ys = _axis_origins(height_px, patch_size_px, stride_px)
    origins = tuple((x, y) for y in ys for x in xs)
    return PatchGrid(patch_size_px=patch_size_px, stride_px=stride_px, origins=origins)


@dataclass(frozen=True)
class ClassProbabilityMap:
    """Per-class probability planes at a stated downsample factor.

    ``planes`` has shape ``(n_classes, h, w)`` where ``h = ceil(height / d)``
    and ``w = ceil(width / d)`` for slide-level maps.
    """

    classes: tuple[str, ...]
    planes: np.ndarray
    downsample_factor: int = 1

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[0] != len(self.classes):
            raise ValueError("planes must be (n_classes, h, w) matching classes")
        if self.downsample_factor not in (1, 2, 4):
            raise ValueError("downsample_factor must be one of 1, 2, 4")

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def plane(self, cls: str) -> np.ndarray:
        return self.planes[self.classes.index(cls)]


@dataclass(frozen=True)
class CompartmentMaskSet:
    """Binary compartment planes plus the derived gland plane (epi OR lumen)."""

    classes: tuple[str, ...]
    masks: np.ndarray  # (n_classes, h, w) bool
    gland: np.ndarray  # (h, w) bool
    downsample_factor: int
    threshold: float

    def mask(self, cls: str) -> np.ndarray:
        return self.masks[self.classes.index(cls)]

    @property
    def height(self) -> int:
        return self.gland.shape[0]

    @property
    def width(self) -> int:
        return self.gland.shape[1]


def pooled_extent(extent: int, factor: int) -> int:
    return math.ceil(extent / factor)


def block_average_pool(plane: np.ndarray, factor: int) -> np.ndarray:
    """Average over factor x factor blocks; edge blocks average the pixels present."""
    if factor == 1:
        return plane.astype(np.float64, copy=True)
    h, w = plane.shape
    ph, pw = pooled_extent(h, factor), pooled_extent(w, factor)
    padded = np.zeros((ph * factor, pw * factor), dtype=np.float64)
    padded[:h, :w] = plane
    counts = np.zeros_like(padded)
    counts[:h, :w] = 1.0
    sums = padded.reshape(ph, factor, pw, factor).sum(axis=(1, 3))
    norms = counts.reshape(ph, factor, pw, factor).sum(axis=(1, 3))
    return sums / norms


def stitch_predictions(
    grid: PatchGrid,
    patch_maps: dict[tuple[int, int], ClassProbabilityMap],
    slide_width: int,
    slide_height: int,
    downsample_factor: int = 1,
) -> ClassProbabilityMap:
    """Reassemble per-patch probability maps into a slide-level map.

    Each full-resolution pixel takes the arithmetic mean of every patch
    prediction covering it; the mean plane is then block-average pooled by
    ``downsample_factor``. Accumulation traverses the grid in its fixed
    row-major order, so the result is independent of how patch predictions
    were produced.
    """
    if not grid.origins:
        raise ValueError("empty grid")
    classes = None
    for origin in grid.origins:
        if origin not in patch_maps:
            raise MissingPatch(f"no prediction for origin {origin}")
        pmap = patch_maps[origin]
        if classes is None:
            classes = pmap.classes
        elif pmap.classes != classes:
            raise ShapeMismatch(f"class lists differ: {pmap.classes} vs {classes}")
        if pmap.downsample_factor != 1:
            raise ShapeMismatch("patch maps must be at downsample factor 1")
        expected = (len(classes), grid.patch_size_px, grid.patch_size_px)
        if pmap.planes.shape != expected:
            raise ShapeMismatch(f"patch planes {pmap.planes.shape} != {expected}")

    n = len(classes)
    acc = np.zeros((n, slide_height, slide_width), dtype=np.float64)
    cover = np.zeros((slide_height, slide_width), dtype=np.float64)
    size = grid.patch_size_px
    for (x, y) in grid.origins:
        acc[:, y : y + size, x : x + size] += patch_maps[(x, y)].planes
        cover[y : y + size, x : x + size] += 1.0
    if np.any(cover == 0):
        raise ShapeMismatch("grid does not cover the full slide extent")
    acc /= cover

    pooled = np.stack([block_average_pool(acc[i], downsample_factor) for i in range(n)])
    return ClassProbabilityMap(
        classes=classes, planes=pooled, downsample_factor=downsample_factor
    )


def fuse_probabilities(
    map_a: ClassProbabilityMap, map_b: ClassProbabilityMap
) -> ClassProbabilityMap:
    """Join two models' predictions by per-pixel, per-class multiplication."""
    if map_a.classes != map_b.classes:
        raise ShapeMismatch(f"class lists differ: {map_a.classes} vs {map_b.classes}")
    if map_a.downsample_factor != map_b.downsample_factor:
        raise ShapeMismatch("downsample factors differ")
    if map_a.planes.shape != map_b.planes.shape:
        raise ShapeMismatch(f"plane shapes differ: {map_a.planes.shape} vs {map_b.planes.shape}")
    return ClassProbabilityMap(
        classes=map_a.classes,
        planes=map_a.planes * map_b.planes,
        downsample_factor=map_a.downsample_factor,
    )


def binarize(prob_map: ClassProbabilityMap, threshold: float = DEFAULT_THRESHOLD) -> CompartmentMaskSet:
    """Threshold probability planes into compartment masks.

    A pixel is on iff its probability is strictly greater than the threshold,
    so a uniform 0.5 plane at the default threshold yields an empty mask.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    masks = prob_map.planes > threshold
    h, w = prob_map.height, prob_map.width
    gland = np.zeros((h, w), dtype=bool)
    if EPITHELIUM in prob_map.classes:
        gland |= masks[prob_map.classes.index(EPITHELIUM)]
    if LUMEN in prob_map.classes:
        gland |= masks[prob_map.classes.index(LUMEN)]
    return CompartmentMaskSet(
        classes=prob_map.classes,
        masks=masks,
        gland=gland,
        downsample_factor=prob_map.downsample_factor,
        threshold=threshold,
    )


def dice_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """Overlap between two binary planes: 2|A∩B| / (|A| + |B|).

    Returns 1.0 when both planes are empty.
    """
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"plane shapes differ: {pred.shape} vs {truth.shape}")
    a = pred.astype(bool)
    b = truth.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / denom


# ---------------------------------------------------------------------------
# File formats: slides as RGB PNG + JSON sidecar; probability maps as one
# 16-bit grayscale PNG per class (probability * 65535); masks as 1-bit PNGs.
# ---------------------------------------------------------------------------

PROB_SCALE = 65535


def write_slide(slide: SlideRaster, directory: Path | str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    png_path = directory / f"{slide.slide_id}.png"
    Image.fromarray(slide.pixels, mode="RGB").save(png_path)
    sidecar = {"slide_id": slide.slide_id, "microns_per_pixel": slide.microns_per_pixel}
    (directory / f"{slide.slide_id}.json").write_text(json.dumps(sidecar, sort_keys=True))
    return png_path


def read_slide(png_path: Path | str) -> SlideRaster:
    png_path = Path(png_path)
    with Image.open(png_path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    sidecar_path = png_path.with_suffix(".json")
    slide_id = png_path.stem
    mpp = None
    if sidecar_path.exists():
        meta = json.loads(sidecar_path.read_text())
        slide_id = meta.get("slide_id", slide_id)
        mpp = meta.get("microns_per_pixel")
    return SlideRaster(slide_id=slide_id, pixels=pixels, microns_per_pixel=mpp)


def write_probability_map(
    prob_map: ClassProbabilityMap,
    directory: Path | str,
    stem: str,
    threshold: float | None = None,
) -> Path:
    """Write one 16-bit PNG per class plus a JSON header; returns header path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, cls in enumerate(prob_map.classes):
        quantized = np.rint(prob_map.planes[i] * PROB_SCALE).astype(np.uint16)
        Image.fromarray(quantized, mode="I;16").save(directory / f"{stem}_{cls}.png")
    header = {
        "classes": list(prob_map.classes),
        "downsample_factor": prob_map.downsample_factor,
        "width": prob_map.width,
        "height": prob_map.height,
        "threshold": threshold,
    }
    header_path = directory / f"{stem}.json"
    header_path.write_text(json.dumps(header, sort_keys=True))
    return header_path


def read_probability_map(header_path: Path | str) -> ClassProbabilityMap:
    header_path = Path(header_path)
    header = json.loads(header_path.read_text())
    stem = header_path.stem
    planes = []
    for cls in header["classes"]:
        with Image.open(header_path.parent / f"{stem}_{cls}.png") as img:
            planes.append(np.asarray(img, dtype=np.float64) / PROB_SCALE)
    return ClassProbabilityMap(
        classes=tuple(header["classes"]),
        planes=np.stack(planes),
        downsample_factor=header["downsample_factor"],
    )


def write_mask(mask: np.ndarray, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(bool)).save(path, bits=1)
    return path


def read_mask(path: Path | str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img).astype(bool)
