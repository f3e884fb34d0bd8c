"""Slide-level overlay maps: gland clusters and prediction-attention scores.

Gland pixels are painted onto a dimmed grayscale rendering of the slide,
cluster maps with a fixed categorical palette and score maps with a
diverging blue-white-red ramp centered at zero. Painting is pure integer
arithmetic so re-rendering identical inputs is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .extraction import GlandInstance
from .mil import MissingLabel, MissingScore
from .raster import SlideRaster, pooled_extent

DEFAULT_ALPHA = 0.6
BASE_DIM_FACTOR = 0.5

# 20 visually distinct colors; indexed modulo for cluster labels.
CLUSTER_PALETTE = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
    (152, 223, 138), (255, 152, 150), (197, 176, 213), (196, 156, 148),
    (247, 182, 210), (199, 199, 199), (219, 219, 141), (158, 218, 229),
)

SCORE_BLUE = (0, 0, 255)
SCORE_WHITE = (255, 255, 255)
SCORE_RED = (255, 0, 0)


@dataclass
class OverlayCanvas:
    """Rendered overlay plus the legend needed to read it."""

    pixels: np.ndarray  # (h, w, 3) uint8
    legend: dict
    painted_gland_ids: list[int]


def palette_color(label: int) -> tuple[int, int, int]:
    return CLUSTER_PALETTE[(int(label) - 1) % len(CLUSTER_PALETTE)]


def diverging_color(score: float, score_range: tuple[float, float] = (-1.0, 1.0)) -> tuple[int, int, int]:
    """Linear blue-white-red ramp: -1 maps to blue, 0 to white, +1 to red."""
    lo, hi = score_range
    span = max(abs(lo), abs(hi))
    t = float(np.clip(score / span, -1.0, 1.0)) if span > 0 else 0.0
    if t >= 0:
        a, b, frac = SCORE_WHITE, SCORE_RED, t
    else:
        a, b, frac = SCORE_WHITE, SCORE_BLUE, -t
    return tuple(int(round(a[c] + (b[c] - a[c]) * frac)) for c in range(3))


def _base_canvas(slide: SlideRaster, downsample: int) -> np.ndarray:
    """Dimmed grayscale of the slide at the render downsample."""
    px = slide.pixels.astype(np.float64)
    gray = 0.299 * px[..., 0] + 0.587 * px[..., 1] + 0.114 * px[..., 2]
    if downsample > 1:
        from .raster import block_average_pool

        gray = block_average_pool(gray, downsample)
    dimmed = np.rint(gray * BASE_DIM_FACTOR).astype(np.uint8)
    return np.repeat(dimmed[..., None], 3, axis=2)


def _paint(
    canvas: np.ndarray,
    instance: GlandInstance,
    render_downsample: int,
    color: tuple[int, int, int],
    alpha: float,
) -> int:
    """Paint one instance's component pixels; returns the painted pixel count."""
    d = instance.mask_downsample
    x, y, w, h = instance.bbox
    mask = instance.component_mask
    if render_downsample != d:
        # nearest-neighbor rescale of the component mask onto the render grid
        scale = d / render_downsample
        out_h = max(1, int(round(mask.shape[0] * scale)))
        out_w = max(1, int(round(mask.shape[1] * scale)))
        src_r = np.minimum((np.arange(out_h) / scale).astype(int), mask.shape[0] - 1)
        src_c = np.minimum((np.arange(out_w) / scale).astype(int), mask.shape[1] - 1)
        mask = mask[src_r][:, src_c]
    ry, rx = y // render_downsample, x // render_downsample
    region = canvas[ry : ry + mask.shape[0], rx : rx + mask.shape[1]]
    local = mask[: region.shape[0], : region.shape[1]]
    blended = np.rint(
        alpha * np.asarray(color, dtype=np.float64) + (1.0 - alpha) * region[local]
    ).astype(np.uint8)
    region[local] = blended
    return int(local.sum())


def render_cluster_map(
    slide: SlideRaster,
    instances: list[GlandInstance],
    labels: dict[int, int],
    downsample: int | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> OverlayCanvas:
    """Paint each gland with its cluster color over the dimmed base layer."""
    for inst in instances:
        if inst.gland_id not in labels:
            raise MissingLabel(f"no cluster label for gland {inst.gland_id}")
    d = downsample or (instances[0].mask_downsample if instances else 1)
    canvas = _base_canvas(slide, d)
    painted = []
    for inst in instances:
        _paint(canvas, inst, d, palette_color(labels[inst.gland_id]), alpha)
        painted.append(inst.gland_id)
    legend = {
        "mode": "cluster",
        "palette": {str(lab): list(palette_color(lab)) for lab in sorted(set(labels.values()))},
        "downsample": d,
        "alpha": alpha,
    }
    return OverlayCanvas(pixels=canvas, legend=legend, painted_gland_ids=painted)


def render_score_map(
    slide: SlideRaster,
    instances: list[GlandInstance],
    scores: dict[int, float],
    score_range: tuple[float, float] = (-1.0, 1.0),
    downsample: int | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> OverlayCanvas:
    """Paint each gland with the diverging score color (blue low, red high)."""
    for inst in instances:
        if inst.gland_id not in scores:
            raise MissingScore(f"no score for gland {inst.gland_id}")
    d = downsample or (instances[0].mask_downsample if instances else 1)
    canvas = _base_canvas(slide, d)
    painted = []
    for inst in instances:
        color = diverging_color(scores[inst.gland_id], score_range)
        _paint(canvas, inst, d, color, alpha)
        painted.append(inst.gland_id)
    legend = {
        "mode": "score",
        "colormap": {"low": list(SCORE_BLUE), "mid": list(SCORE_WHITE), "high": list(SCORE_RED)},
        "score_range": list(score_range),
        "downsample": d,
        "alpha": alpha,
    }
    return OverlayCanvas(pixels=canvas, legend=legend, painted_gland_ids=painted)


def write_overlay(canvas: OverlayCanvas, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas.pixels, mode="RGB").save(path)
    path.with_suffix(".legend.json").write_text(json.dumps(canvas.legend, sort_keys=True))
    return path
