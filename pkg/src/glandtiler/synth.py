"""Synthetic substrates: slides with known gland geometry, and MIL bags
with planted witness instances.

The slide generator rasterizes elliptical glands (a lumen ellipse inside an
epithelium ring, nuclei as small disks on the ring) over pink-textured
stroma, records each gland's analytic areas, and keeps the exact label
plane so an oracle segmenter can replay it. The bag generator draws
background instances from a unit Gaussian and plants a witness cluster at a
configurable separation inside positive bags.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingBag
from .raster import SlideRaster

STROMA_RGB = (240, 200, 220)
EPITHELIUM_RGB = (150, 110, 180)
LUMEN_RGB = (242, 242, 252)
NUCLEI_RGB = (70, 50, 120)

LABEL_STROMA, LABEL_EPITHELIUM, LABEL_LUMEN = 0, 1, 2


class PlacementFailure(RuntimeError):
    """Could not place the requested glands without overlap."""


@dataclass
class SynthGland:
    center: tuple[float, float]  # (cx, cy)
    outer_axes: tuple[float, float]  # semi-axes (a, b)
    lumen_fraction: float
    angle: float
    n_nuclei: int

    @property
    def analytic_outer_area(self) -> float:
        return float(np.pi * self.outer_axes[0] * self.outer_axes[1])

    @property
    def analytic_lumen_area(self) -> float:
        return self.analytic_outer_area * self.lumen_fraction**2

    @property
    def analytic_epithelium_area(self) -> float:
        return self.analytic_outer_area - self.analytic_lumen_area


@dataclass
class SynthSlide:
    slide: SlideRaster
    truth_labels: np.ndarray  # (H, W) int: 0 stroma, 1 epithelium, 2 lumen
    nuclei_truth: np.ndarray  # (H, W) bool
    glands: list[SynthGland]

    @property
    def gland_truth(self) -> np.ndarray:
        return self.truth_labels > 0


def _ellipse_mask(
    height: int, width: int, gland: SynthGland, fraction: float = 1.0
) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Boolean plane for the ellipse scaled by `fraction`, plus its bbox window."""
    cx, cy = gland.center
    a, b = gland.outer_axes[0] * fraction, gland.outer_axes[1] * fraction
    reach = int(np.ceil(max(a, b))) + 2
    x0, x1 = max(0, int(cx) - reach), min(width, int(cx) + reach + 1)
    y0, y1 = max(0, int(cy) - reach), min(height, int(cy) + reach + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs - cx, ys - cy
    cos_t, sin_t = np.cos(gland.angle), np.sin(gland.angle)
    u = (dx * cos_t + dy * sin_t) / a
    v = (-dx * sin_t + dy * cos_t) / b
    local = u * u + v * v <= 1.0
    mask = np.zeros((height, width), dtype=bool)
    mask[y0:y1, x0:x1] = local
    return mask, (x0, y0, x1 - x0, y1 - y0)


def synth_slide(
    seed: int,
    n_glands: int,
    size: int = 2048,
    outer_axis_range: tuple[float, float] = (40.0, 90.0),
    lumen_fraction_range: tuple[float, float] = (0.35, 0.6),
    nuclei_per_gland: tuple[int, int] = (8, 20),
    nucleus_radius_range: tuple[float, float] = (2.5, 4.5),
    placement_gap: float = 24.0,
    max_attempts: int = 2000,
) -> SynthSlide:
    """Generate a slide with non-overlapping elliptical glands.

    Placements are rejection-sampled; exceeding ``max_attempts`` raises
    :class:`PlacementFailure`. Analytic lumen and epithelium areas follow
    from the ellipse axes; rasterized pixel counts land within 1% for the
    default axis range.
    """
    rng = np.random.default_rng([seed, 23])
    height = width = int(size)

    glands: list[SynthGland] = []
    attempts = 0
    while len(glands) < n_glands:
        if attempts >= max_attempts:
            raise PlacementFailure(
                f"placed {len(glands)}/{n_glands} glands after {max_attempts} attempts"
            )
        attempts += 1
        a = rng.uniform(*outer_axis_range)
        b = rng.uniform(*outer_axis_range)
        reach = max(a, b)
        if 2 * (reach + placement_gap) >= size:
            continue
        cx = rng.uniform(reach + placement_gap, width - reach - placement_gap)
        cy = rng.uniform(reach + placement_gap, height - reach - placement_gap)
        ok = True
        for other in glands:
            other_reach = max(other.outer_axes)
            min_dist = reach + other_reach + placement_gap
            if (cx - other.center[0]) ** 2 + (cy - other.center[1]) ** 2 < min_dist**2:
                ok = False
                break
        if not ok:
            continue
        glands.append(
            SynthGland(
                center=(cx, cy),
                outer_axes=(a, b),
                lumen_fraction=float(rng.uniform(*lumen_fraction_range)),
                angle=float(rng.uniform(0.0, np.pi)),
                n_nuclei=int(rng.integers(nuclei_per_gland[0], nuclei_per_gland[1] + 1)),
            )
        )

    labels = np.zeros((height, width), dtype=np.int64)
    nuclei = np.zeros((height, width), dtype=bool)
    for gland in glands:
        outer, _ = _ellipse_mask(height, width, gland)
        lumen, _ = _ellipse_mask(height, width, gland, gland.lumen_fraction)
        labels[outer] = LABEL_EPITHELIUM
        labels[lumen] = LABEL_LUMEN
        ring = outer & ~lumen
        # nuclei as small disks centered on the epithelial ring
        for _ in range(gland.n_nuclei):
            t = rng.uniform(0.0, 2.0 * np.pi)
            rad_frac = rng.uniform(gland.lumen_fraction + 0.08, 0.92)
            cos_a, sin_a = np.cos(gland.angle), np.sin(gland.angle)
            ex = gland.outer_axes[0] * rad_frac * np.cos(t)
            ey = gland.outer_axes[1] * rad_frac * np.sin(t)
            nx = gland.center[0] + ex * cos_a - ey * sin_a
            ny = gland.center[1] + ex * sin_a + ey * cos_a
            radius = rng.uniform(*nucleus_radius_range)
            r = int(np.ceil(radius)) + 1
            x0, x1 = max(0, int(nx) - r), min(width, int(nx) + r + 1)
            y0, y1 = max(0, int(ny) - r), min(height, int(ny) + r + 1)
            ys, xs = np.mgrid[y0:y1, x0:x1]
            disk = (xs - nx) ** 2 + (ys - ny) ** 2 <= radius**2
            window = nuclei[y0:y1, x0:x1]
            window |= disk & ring[y0:y1, x0:x1]

    pixels = np.empty((height, width, 3), dtype=np.float64)
    pixels[...] = STROMA_RGB
    pixels += rng.normal(0.0, 4.0, (height, width, 3))
    epi = labels == LABEL_EPITHELIUM
    lum = labels == LABEL_LUMEN
    pixels[epi] = EPITHELIUM_RGB + rng.normal(0.0, 4.0, (int(epi.sum()), 3))
    # lumen jitter shares one offset per pixel so the blue tint is preserved
    lum_offsets = rng.normal(0.0, 1.5, int(lum.sum()))
    pixels[lum] = np.asarray(LUMEN_RGB) + lum_offsets[:, None]
    pixels[nuclei] = NUCLEI_RGB + rng.normal(0.0, 4.0, (int(nuclei.sum()), 3))
    raster = SlideRaster(
        slide_id=f"synth-{seed:04d}",
        pixels=np.clip(np.rint(pixels), 0, 255).astype(np.uint8),
        microns_per_pixel=0.25,
    )
    return SynthSlide(slide=raster, truth_labels=labels, nuclei_truth=nuclei, glands=glands)


def write_synth_slide(synth: SynthSlide, directory: Path | str) -> Path:
    """Slide PNG + sidecar, truth planes, and analytic gland geometry."""
    from PIL import Image

    from .raster import write_slide

    directory = Path(directory)
    png_path = write_slide(synth.slide, directory)
    stem = synth.slide.slide_id
    Image.fromarray(synth.truth_labels.astype(np.uint8), mode="L").save(
        directory / f"{stem}_truth_labels.png"
    )
    Image.fromarray(synth.nuclei_truth).save(directory / f"{stem}_truth_nuclei.png", bits=1)
    truth = {
        "slide_id": stem,
        "glands": [
            {
                "center": list(g.center),
                "outer_axes": list(g.outer_axes),
                "lumen_fraction": g.lumen_fraction,
                "angle": g.angle,
                "n_nuclei": g.n_nuclei,
                "analytic_lumen_area": g.analytic_lumen_area,
                "analytic_epithelium_area": g.analytic_epithelium_area,
            }
            for g in synth.glands
        ],
    }
    (directory / f"{stem}_truth.json").write_text(json.dumps(truth, sort_keys=True))
    return png_path


def read_truth_planes(directory: Path | str, slide_id: str) -> tuple[np.ndarray, np.ndarray]:
    from PIL import Image

    directory = Path(directory)
    with Image.open(directory / f"{slide_id}_truth_labels.png") as img:
        labels = np.asarray(img, dtype=np.int64)
    with Image.open(directory / f"{slide_id}_truth_nuclei.png") as img:
        nuclei = np.asarray(img).astype(bool)
    return labels, nuclei


# ---------------------------------------------------------------------------
# Witness-based MIL bags.
# ---------------------------------------------------------------------------


@dataclass
class SynthBags:
    bags: list[EmbeddingBag]
    witness: list[np.ndarray]  # per bag: bool flags over the valid rows
    witness_direction: np.ndarray


def synth_bags(
    seed: int,
    n_bags: int,
    witness_rate: float = 0.1,
    dim: int = 64,
    instances_range: tuple[int, int] = (20, 50),
    max_instances: int = 64,
    separation: float = 6.0,
) -> SynthBags:
    """Balanced bags: negatives are pure background noise, positives carry
    max(1, round(rate * n)) witness instances shifted by ``separation``."""
    if not 0.0 < witness_rate <= 1.0:
        raise ValueError("witness_rate must lie in (0, 1]")
    rng = np.random.default_rng([seed, 29])
    direction = rng.normal(0.0, 1.0, dim)
    direction /= np.linalg.norm(direction)
    labels = np.zeros(n_bags, dtype=int)
    labels[: n_bags // 2] = 1
    labels = labels[rng.permutation(n_bags)]
    bags, witness_flags = [], []
    for b in range(n_bags):
        n = int(rng.integers(instances_range[0], instances_range[1] + 1))
        n = min(n, max_instances)
        rows = rng.normal(0.0, 1.0, (n, dim))
        flags = np.zeros(n, dtype=bool)
        if labels[b] == 1:
            n_wit = max(1, int(round(witness_rate * n)))
            which = rng.choice(n, size=n_wit, replace=False)
            rows[which] += separation * direction
            flags[which] = True
        matrix = np.zeros((max_instances, dim), dtype=np.float64)
        validity = np.zeros(max_instances, dtype=bool)
        matrix[:n] = rows
        validity[:n] = True
        bags.append(
            EmbeddingBag(
                case_id=f"case{b:04d}",
                slide_id=f"bag{b:04d}",
                label=int(labels[b]),
                instances=matrix,
                validity=validity,
                gland_ids=list(range(1, n + 1)),
            )
        )
        witness_flags.append(flags)
    return SynthBags(bags=bags, witness=witness_flags, witness_direction=direction)


def shuffle_bag_labels(bags: list[EmbeddingBag], seed: int) -> list[EmbeddingBag]:
    """Permutation-null control: reassign the label multiset across bags."""
    rng = np.random.default_rng([seed, 31])
    labels = np.array([b.label for b in bags])
    shuffled = labels[rng.permutation(labels.size)]
    return [
        EmbeddingBag(
            case_id=b.case_id,
            slide_id=b.slide_id,
            label=int(lab),
            instances=b.instances,
            validity=b.validity,
            gland_ids=list(b.gland_ids),
        )
        for b, lab in zip(bags, shuffled)
    ]


# ---------------------------------------------------------------------------
# Clustered embeddings with jittered views (contrastive-learning substrate).
# ---------------------------------------------------------------------------


def synth_clustered_embeddings(
    seed: int,
    n_clusters: int = 5,
    glands_per_cluster: int = 40,
    views_per_gland: int = 2,
    dim: int = 512,
    separation: float = 6.0,
    jitter: float = 0.3,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(matrix, gland_ids, cluster_ids): views of a gland share its id and
    differ by Gaussian jitter; glands scatter around their cluster center."""
    rng = np.random.default_rng([seed, 37])
    centers = rng.normal(0.0, 1.0, (n_clusters, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    rows, gland_ids, cluster_ids = [], [], []
    gland = 0
    for c in range(n_clusters):
        for _ in range(glands_per_cluster):
            gland += 1
            base = centers[c] + rng.normal(0.0, 1.0, dim)
            for _ in range(views_per_gland):
                rows.append(base + rng.normal(0.0, jitter, dim))
                gland_ids.append(gland)
                cluster_ids.append(c + 1)
    return np.asarray(rows), np.asarray(gland_ids), np.asarray(cluster_ids)
