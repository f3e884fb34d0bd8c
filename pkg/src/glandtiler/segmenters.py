"""Pluggable per-patch segmenters.

Three kinds share one contract: given an RGB patch, return per-pixel class
probabilities. The ``oracle`` kind replays ground-truth masks attached at
construction, the ``stain_heuristic`` kind classifies pixels from fixed-matrix
color deconvolution into hematoxylin/eosin densities, and the ``external``
kind adapts a model-interchange file when one is supplied. All kinds are
stateless after construction and bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster import (
    EPITHELIUM,
    LUMEN,
    NUCLEI,
    SEGMENTATION_CLASSES,
    STROMA_BACKGROUND,
    ClassProbabilityMap,
)


class BadPatchSize(ValueError):
    """Patch dimensions disagree with the segmenter's expected size."""


class ExternalModelUnavailable(RuntimeError):
    """The external segmenter kind was requested without a usable model."""


# Ruifrok-Johnston H&E stain vectors; residual completes the basis.
_HEMATOXYLIN = np.array([0.650, 0.704, 0.286])
_EOSIN = np.array([0.072, 0.990, 0.105])


def _deconvolution_matrix() -> np.ndarray:
    h = _HEMATOXYLIN / np.linalg.norm(_HEMATOXYLIN)
    e = _EOSIN / np.linalg.norm(_EOSIN)
    r = np.cross(h, e)
    r /= np.linalg.norm(r)
    return np.linalg.inv(np.stack([h, e, r]))


_DECONV = _deconvolution_matrix()


@dataclass(frozen=True)
class StainThresholds:
    """Decision boundaries on deconvolved stain densities.

    Calibrated jointly with the synthetic slide palette: epithelium purple
    falls at hematoxylin ~0.27-0.36, stroma pink below 0.12, nuclei above
    0.8; lumen is near-unstained with a slight blue tint while true
    background has zero optical density and no tint.
    """

    epithelium_hematoxylin: float = 0.18
    nuclei_hematoxylin: float = 0.55
    lumen_total_od: float = 0.12
    lumen_blue_tint: float = 5.0  # min (B - R) in 8-bit units


def stain_densities(patch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (hematoxylin, eosin) densities and total optical density."""
    rgb = np.clip(patch.astype(np.float64), 1.0, 255.0)
    od = -np.log10(rgb / 255.0)
    dens = od @ _DECONV
    return dens[..., :2], od.sum(axis=-1)


@dataclass(frozen=True)
class SegmenterDescriptor:
    """Identifies a segmenter kind, its class list, and expected patch size."""

    kind: str  # oracle | stain_heuristic | external
    classes: tuple[str, ...] = SEGMENTATION_CLASSES
    patch_size_px: int = 1024
    # oracle: ground-truth class index plane for the whole slide, values
    # indexing into `classes`; nuclei oracle uses `nuclei_truth` (bool plane).
    truth_labels: np.ndarray | None = None
    nuclei_truth: np.ndarray | None = None
    thresholds: StainThresholds = field(default_factory=StainThresholds)
    model_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("oracle", "stain_heuristic", "external"):
            raise ValueError(f"unknown segmenter kind {self.kind!r}")
        unknown = set(self.classes) - {STROMA_BACKGROUND, EPITHELIUM, LUMEN, NUCLEI}
        if unknown:
            raise ValueError(f"unknown classes {sorted(unknown)}")


def oracle_descriptor(
    truth_labels: np.ndarray,
    nuclei_truth: np.ndarray | None = None,
    patch_size_px: int = 1024,
) -> SegmenterDescriptor:
    """Oracle over a slide-sized class-index plane (0=stroma, 1=epi, 2=lumen)."""
    return SegmenterDescriptor(
        kind="oracle",
        patch_size_px=patch_size_px,
        truth_labels=truth_labels,
        nuclei_truth=nuclei_truth,
    )


def _check_patch(descriptor: SegmenterDescriptor, patch: np.ndarray) -> None:
    size = descriptor.patch_size_px
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise BadPatchSize(f"patch must be (H, W, 3), got {patch.shape}")
    if patch.shape[0] != size or patch.shape[1] != size:
        raise BadPatchSize(f"expected {size}x{size} patch, got {patch.shape[:2]}")


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    planes = np.zeros((n_classes, labels.shape[0], labels.shape[1]), dtype=np.float64)
    for i in range(n_classes):
        planes[i] = labels == i
    return planes


def _heuristic_labels(patch: np.ndarray, thr: StainThresholds) -> np.ndarray:
    dens, total_od = stain_densities(patch)
    hema = dens[..., 0]
    blue_tint = patch[..., 2].astype(np.float64) - patch[..., 0].astype(np.float64)
    labels = np.zeros(patch.shape[:2], dtype=np.int64)  # stroma_background
    is_pale = (total_od <= thr.lumen_total_od) & (blue_tint >= thr.lumen_blue_tint)
    labels[is_pale] = 2  # lumen
    labels[hema >= thr.epithelium_hematoxylin] = 1  # epithelium wins over pale
    return labels


def segment_patch(
    descriptor: SegmenterDescriptor,
    patch: np.ndarray,
    origin: tuple[int, int] = (0, 0),
) -> ClassProbabilityMap:
    """Per-pixel probabilities over the descriptor's classes for one patch.

    ``origin`` locates the patch on the slide; the oracle kind needs it to
    index its attached truth plane.
    """
    _check_patch(descriptor, patch)
    size = descriptor.patch_size_px
    if descriptor.kind == "oracle":
        if descriptor.truth_labels is None:
            raise ValueError("oracle descriptor lacks truth_labels")
        x, y = origin
        labels = descriptor.truth_labels[y : y + size, x : x + size]
        if labels.shape != (size, size):
            raise BadPatchSize(f"origin {origin} falls outside the truth plane")
        planes = _one_hot(labels, len(descriptor.classes))
    elif descriptor.kind == "stain_heuristic":
        labels = _heuristic_labels(patch, descriptor.thresholds)
        planes = _one_hot(labels, len(descriptor.classes))
    else:
        raise ExternalModelUnavailable(
            "external segmenter requires a model adapter; none is configured"
            + (f" (model_path={descriptor.model_path})" if descriptor.model_path else "")
        )
    return ClassProbabilityMap(classes=descriptor.classes, planes=planes, downsample_factor=1)


def segment_nuclei(
    descriptor: SegmenterDescriptor,
    patch: np.ndarray,
    origin: tuple[int, int] = (0, 0),
) -> ClassProbabilityMap:
    """Single-class nuclei probability map (dark-hematoxylin thresholding)."""
    _check_patch(descriptor, patch)
    size = descriptor.patch_size_px
    if descriptor.kind == "oracle":
        if descriptor.nuclei_truth is None:
            raise ValueError("oracle descriptor lacks nuclei_truth")
        x, y = origin
        plane = descriptor.nuclei_truth[y : y + size, x : x + size].astype(np.float64)
        if plane.shape != (size, size):
            raise BadPatchSize(f"origin {origin} falls outside the nuclei truth plane")
    elif descriptor.kind == "stain_heuristic":
        dens, _ = stain_densities(patch)
        plane = (dens[..., 0] >= descriptor.thresholds.nuclei_hematoxylin).astype(np.float64)
    else:
        raise ExternalModelUnavailable("external segmenter requires a model adapter")
    return ClassProbabilityMap(classes=(NUCLEI,), planes=plane[None], downsample_factor=1)
