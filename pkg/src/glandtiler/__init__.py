"""Gland-centric tiling of slide rasters with instance embeddings,
contrastive refinement, clustering, attention-MIL, and overlay maps."""

__version__ = "0.1.0"

from . import (
    clustering,
    config,
    contrastive,
    embeddings,
    extraction,
    maps,
    mil,
    raster,
    segmenters,
    synth,
)

__all__ = [
    "clustering",
    "config",
    "contrastive",
    "embeddings",
    "extraction",
    "maps",
    "mil",
    "raster",
    "segmenters",
    "synth",
    "__version__",
]
