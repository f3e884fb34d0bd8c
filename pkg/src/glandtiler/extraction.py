"""Gland instance extraction from compartment masks.

Connected components of the gland plane become :class:`GlandInstance` objects
carrying bbox-local compartment sub-masks, a compartment-coded crop
(background black, epithelium green, lumen blue, nuclei red), and a
:class:`MorphometricRecord`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .raster import (
    EPITHELIUM,
    LUMEN,
    NUCLEI,
    STROMA_BACKGROUND,
    CompartmentMaskSet,
    ShapeMismatch,
    SlideRaster,
)

DEFAULT_MIN_AREA_PX = 1000  # at level 0 (40X)
DEFAULT_MARGIN_PX = 32

CROP_BACKGROUND = (0, 0, 0)
CROP_EPITHELIUM = (0, 255, 0)
CROP_LUMEN = (0, 0, 255)
CROP_NUCLEI = (255, 0, 0)

_STRUCTURE_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCTURE_8 = np.ones((3, 3), dtype=bool)


class EmptyEpithelium(ValueError):
    """Epithelial density requested for an instance with no epithelium."""


def connected_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label connected on-pixel regions 1..n; 0 is background.

    Labels are assigned in raster-scan order of each component's first pixel,
    so the output matches a scanning flood fill exactly.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    structure = _STRUCTURE_4 if connectivity == 4 else _STRUCTURE_8
    raw, count = ndimage.label(np.asarray(mask, dtype=bool), structure=structure)
    if count == 0:
        return raw.astype(np.int64), 0
    # Canonicalize label order by first occurrence in the flattened raster.
    flat = raw.ravel()
    on = np.flatnonzero(flat)
    first_seen = np.full(count + 1, flat.size, dtype=np.int64)
    # reversed so earlier indices overwrite later ones
    first_seen[flat[on[::-1]]] = on[::-1]
    order = np.argsort(first_seen[1:], kind="stable")
    remap = np.zeros(count + 1, dtype=np.int64)
    remap[1 + order] = np.arange(1, count + 1)
    return remap[raw], count


@dataclass(frozen=True)
class MorphometricRecord:
    """Hand-crafted geometric features of one gland instance.

    Relative luminal/epithelial areas are fractions of the gland mask;
    stromal area and nuclei proportion are fractions of the crop rectangle.
    ``epithelial_nuclei_density`` is None when the instance has no epithelium.
    """

    gland_area_px: int
    rel_lumen_area: float
    rel_epithelium_area: float
    rel_stroma_area: float
    nuclei_proportion: float
    epithelial_nuclei_density: float | None

    def as_vector(self) -> np.ndarray:
        """Fixed 6-feature encoding; undefined density maps to 0, area to a log scale."""
        density = 0.0 if self.epithelial_nuclei_density is None else self.epithelial_nuclei_density
        return np.array(
            [
                self.rel_lumen_area,
                self.rel_epithelium_area,
                self.rel_stroma_area,
                self.nuclei_proportion,
                density,
                np.log10(1.0 + self.gland_area_px) / 8.0,
            ],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class GlandInstance:
    """One connected gland with bbox-local masks and a compartment-coded crop."""

    gland_id: int
    slide_id: str
    bbox: tuple[int, int, int, int]  # (x, y, w, h) at level 0
    mask_downsample: int
    component_mask: np.ndarray  # bbox-local bool, at mask resolution
    epithelium_mask: np.ndarray
    lumen_mask: np.ndarray
    nuclei_mask: np.ndarray
    crop: np.ndarray  # (h, w, 3) uint8 compartment-coded rendering
    area_px: int

    @property
    def morphometrics(self) -> MorphometricRecord:
        return morphometrics(self)


def render_crop(
    component: np.ndarray,
    epithelium: np.ndarray,
    lumen: np.ndarray,
    nuclei: np.ndarray,
) -> np.ndarray:
    """Compartment-coded rendering: black background, green epithelium, blue lumen, red nuclei."""
    crop = np.zeros((*component.shape, 3), dtype=np.uint8)
    crop[epithelium] = CROP_EPITHELIUM
    crop[lumen] = CROP_LUMEN
    crop[nuclei] = CROP_NUCLEI
    return crop


def extract_instances(
    masks: CompartmentMaskSet,
    slide: SlideRaster | None = None,
    min_area_px: int = DEFAULT_MIN_AREA_PX,
    margin_px: int = DEFAULT_MARGIN_PX,
    nuclei_mask: np.ndarray | None = None,
    connectivity: int = 8,
    slide_id: str = "",
) -> list[GlandInstance]:
    """Extract one instance per gland-plane component with area >= min_area_px.

    ``min_area_px`` is stated in level-0 pixels; components are filtered on
    their level-0-equivalent area (mask pixels x d^2). Bounding boxes are
    rescaled to level 0; masks and crops stay at the mask resolution.
    ``margin_px`` (level 0) pads the bbox for rendering context.
    """
    d = masks.downsample_factor
    if slide is not None:
        from .raster import pooled_extent

        if (pooled_extent(slide.height_px, d), pooled_extent(slide.width_px, d)) != (
            masks.height,
            masks.width,
        ):
            raise ShapeMismatch(
                f"mask plane {masks.height}x{masks.width} inconsistent with slide "
                f"{slide.height_px}x{slide.width_px} at downsample {d}"
            )
        slide_id = slide.slide_id

    labels, count = connected_components(masks.gland, connectivity=connectivity)
    if count == 0:
        return []

    epi = masks.mask(EPITHELIUM) if EPITHELIUM in masks.classes else np.zeros_like(masks.gland)
    lum = masks.mask(LUMEN) if LUMEN in masks.classes else np.zeros_like(masks.gland)
    if nuclei_mask is None:
        nuc = (
            masks.mask(NUCLEI)
            if NUCLEI in masks.classes
            else np.zeros_like(masks.gland)
        )
    else:
        if nuclei_mask.shape != masks.gland.shape:
            raise ShapeMismatch("nuclei mask shape differs from gland plane")
        nuc = nuclei_mask.astype(bool)

    margin = max(0, margin_px // d)
    h, w = masks.gland.shape
    slices = ndimage.find_objects(labels)
    instances: list[GlandInstance] = []
    gland_id = 0
    for comp_idx, slc in enumerate(slices, start=1):
        if slc is None:
            continue
        area = int((labels[slc] == comp_idx).sum())
        if area * d * d < min_area_px:
            continue
        y0 = max(0, slc[0].start - margin)
        y1 = min(h, slc[0].stop + margin)
        x0 = max(0, slc[1].start - margin)
        x1 = min(w, slc[1].stop + margin)
        window = (slice(y0, y1), slice(x0, x1))
        component = labels[window] == comp_idx
        epi_local = epi[window] & component
        lum_local = lum[window] & component
        nuc_local = nuc[window] & component
        gland_id += 1
        instances.append(
            GlandInstance(
                gland_id=gland_id,
                slide_id=slide_id,
                bbox=(x0 * d, y0 * d, (x1 - x0) * d, (y1 - y0) * d),
                mask_downsample=d,
                component_mask=component,
                epithelium_mask=epi_local,
                lumen_mask=lum_local,
                nuclei_mask=nuc_local,
                crop=render_crop(component, epi_local, lum_local, nuc_local),
                area_px=area,
            )
        )
    return instances


def morphometrics(instance: GlandInstance) -> MorphometricRecord:
    """Compute the morphometric record for one instance.

    The epithelial nuclei density is left undefined (None) rather than
    reported as 0 when the instance has no epithelium pixels.
    """
    gland_area = int(instance.component_mask.sum())
    if gland_area == 0:
        raise ValueError("instance component mask is empty")
    epi_area = int(instance.epithelium_mask.sum())
    lum_area = int(instance.lumen_mask.sum())
    nuc_area = int(instance.nuclei_mask.sum())
    crop_px = instance.component_mask.size
    stroma_px = crop_px - gland_area
    if epi_area == 0:
        density = None
    else:
        density = int((instance.nuclei_mask & instance.epithelium_mask).sum()) / epi_area
    return MorphometricRecord(
        gland_area_px=gland_area,
        rel_lumen_area=lum_area / gland_area,
        rel_epithelium_area=epi_area / gland_area,
        rel_stroma_area=stroma_px / crop_px,
        nuclei_proportion=nuc_area / crop_px,
        epithelial_nuclei_density=density,
    )


def epithelial_nuclei_density(instance: GlandInstance) -> float:
    """Strict accessor that raises instead of returning None."""
    record = morphometrics(instance)
    if record.epithelial_nuclei_density is None:
        raise EmptyEpithelium(f"gland {instance.gland_id} has no epithelium pixels")
    return record.epithelial_nuclei_density


# ---------------------------------------------------------------------------
# Export: one crop PNG per gland plus a JSON-lines manifest per slide.
# ---------------------------------------------------------------------------


def export_instances(
    instances: list[GlandInstance],
    directory: Path | str,
    slide: SlideRaster | None = None,
    raw_crops: bool = False,
) -> Path:
    """Write `<slide_id>/<gland_id>.png` crops and a per-slide manifest.

    With ``raw_crops`` and a slide, additionally export the raw RGB region
    under each bbox as `<gland_id>_raw.png`.
    """
    directory = Path(directory)
    manifest_rows = []
    slide_id = instances[0].slide_id if instances else (slide.slide_id if slide else "slide")
    crop_dir = directory / slide_id
    crop_dir.mkdir(parents=True, exist_ok=True)
    for inst in instances:
        Image.fromarray(inst.crop, mode="RGB").save(crop_dir / f"{inst.gland_id}.png")
        if raw_crops and slide is not None:
            x, y, w, h = inst.bbox
            raw = slide.pixels[y : y + h, x : x + w]
            Image.fromarray(raw, mode="RGB").save(crop_dir / f"{inst.gland_id}_raw.png")
        record = morphometrics(inst)
        manifest_rows.append(
            {
                "gland_id": inst.gland_id,
                "slide_id": inst.slide_id,
                "bbox": list(inst.bbox),
                "mask_downsample": inst.mask_downsample,
                "area_px": inst.area_px,
                "morphometrics": asdict(record),
            }
        )
    manifest_path = directory / f"{slide_id}_manifest.jsonl"
    with manifest_path.open("w") as fh:
        for row in manifest_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(manifest_path: Path | str) -> list[dict]:
    rows = []
    with Path(manifest_path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
