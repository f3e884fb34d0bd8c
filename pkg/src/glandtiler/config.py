"""Pipeline configuration: one JSON file, flag overrides, full validation.

Every tunable constant is surfaced as a key so benchmark grids and the
extraction pipeline are expressible declaratively. Defaults follow the
pipeline's canonical operating point (1024 patch, 0.5 threshold, 224
resize, 512-d embeddings, 1,000-instance bags, 0.75 margin, 128-d
projection, 3-NN, cluster search 2-20).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; ``violations`` lists every offending field."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


@dataclass
class PipelineConfig:
    patch_size_px: int = 1024
    stride_px: int = 768
    threshold: float = 0.5
    downsample_factor: int = 2
    min_area_px: int = 1000
    margin_px: int = 32
    connectivity: int = 8
    crop_edge: int = 224
    embedding_dim: int = 512
    encoder_tag: str = "baseline-v1"
    bag_cap: int = 1000
    cl_margin: float = 0.75
    cl_projection_dim: int = 128
    cl_hidden_dim: int = 256
    cl_batch_size: int = 128
    cl_learn_rate: float = 0.1
    cl_epochs: int = 25
    cl_checkpoints: list[int] = field(default_factory=lambda: [1, 3, 5, 25])
    cluster_k_min: int = 2
    cluster_k_max: int = 20
    cluster_linkage: str = "ward"
    cluster_criterion: str = "ch_index"
    knn_k: int = 3
    mil_hidden_dim: int = 128
    mil_batch_sizes: list[int] = field(default_factory=lambda: [4, 8])
    mil_learn_rates: list[float] = field(default_factory=lambda: [1e-4, 1e-3])
    mil_epochs: list[int] = field(default_factory=lambda: [8, 16, 32])
    mil_repeats: int = 3
    map_alpha: float = 0.6
    seed: int = 0
    threads: int = 1

    def sweep(self) -> dict:
        return {
            "batch_size": tuple(self.mil_batch_sizes),
            "learn_rate": tuple(self.mil_learn_rates),
            "epochs": tuple(self.mil_epochs),
        }

    def validate(self) -> None:
        """Raise :class:`ConfigError` listing every violated field."""
        v = []
        if self.patch_size_px < 1:
            v.append(f"patch_size_px must be >= 1 (got {self.patch_size_px})")
        if not 1 <= self.stride_px <= self.patch_size_px:
            v.append(f"stride_px must lie in [1, patch_size_px] (got {self.stride_px})")
        if not 0.0 < self.threshold < 1.0:
            v.append(f"threshold must lie in (0, 1) (got {self.threshold})")
        if self.downsample_factor not in (1, 2, 4):
            v.append(f"downsample_factor must be 1, 2, or 4 (got {self.downsample_factor})")
        if self.min_area_px < 0:
            v.append(f"min_area_px must be >= 0 (got {self.min_area_px})")
        if self.margin_px < 0:
            v.append(f"margin_px must be >= 0 (got {self.margin_px})")
        if self.connectivity not in (4, 8):
            v.append(f"connectivity must be 4 or 8 (got {self.connectivity})")
        if self.crop_edge < 1:
            v.append(f"crop_edge must be >= 1 (got {self.crop_edge})")
        if self.embedding_dim < 1:
            v.append(f"embedding_dim must be >= 1 (got {self.embedding_dim})")
        if self.bag_cap < 1:
            v.append(f"bag_cap must be >= 1 (got {self.bag_cap})")
        if self.cl_margin <= 0:
            v.append(f"cl_margin must be > 0 (got {self.cl_margin})")
        if self.cl_projection_dim < 1:
            v.append(f"cl_projection_dim must be >= 1 (got {self.cl_projection_dim})")
        if self.cl_batch_size < 2:
            v.append(f"cl_batch_size must be >= 2 (got {self.cl_batch_size})")
        if self.cl_learn_rate <= 0:
            v.append(f"cl_learn_rate must be > 0 (got {self.cl_learn_rate})")
        if self.cl_epochs < 0:
            v.append(f"cl_epochs must be >= 0 (got {self.cl_epochs})")
        if not 1 <= self.cluster_k_min <= self.cluster_k_max:
            v.append(
                "cluster_k_min..cluster_k_max must be a nonempty range "
                f"(got {self.cluster_k_min}..{self.cluster_k_max})"
            )
        if self.cluster_linkage not in ("ward", "single", "complete", "average"):
            v.append(f"cluster_linkage unknown (got {self.cluster_linkage!r})")
        if self.cluster_criterion not in ("ch_index", "raw_ratio"):
            v.append(f"cluster_criterion unknown (got {self.cluster_criterion!r})")
        if self.knn_k < 1:
            v.append(f"knn_k must be >= 1 (got {self.knn_k})")
        if self.mil_hidden_dim < 1:
            v.append(f"mil_hidden_dim must be >= 1 (got {self.mil_hidden_dim})")
        if not self.mil_batch_sizes or any(b < 1 for b in self.mil_batch_sizes):
            v.append(f"mil_batch_sizes must be positive (got {self.mil_batch_sizes})")
        if not self.mil_learn_rates or any(r <= 0 for r in self.mil_learn_rates):
            v.append(f"mil_learn_rates must be positive (got {self.mil_learn_rates})")
        if not self.mil_epochs or any(e < 1 for e in self.mil_epochs):
            v.append(f"mil_epochs must be positive (got {self.mil_epochs})")
        if self.mil_repeats < 1:
            v.append(f"mil_repeats must be >= 1 (got {self.mil_repeats})")
        if not 0.0 <= self.map_alpha <= 1.0:
            v.append(f"map_alpha must lie in [0, 1] (got {self.map_alpha})")
        if self.threads < 1:
            v.append(f"threads must be >= 1 (got {self.threads})")
        if v:
            raise ConfigError(v)


def load_config(path: Path | str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, optionally a JSON file on top, then explicit overrides."""
    values: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(PipelineConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in sorted(unknown)])
        values.update(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    config = PipelineConfig(**values)
    config.validate()
    return config
