"""Crop preprocessing, instance encoders, embedding stores, labels, and MIL bags.

The encoder contract is a tag-dispatched function from preprocessed crops to
fixed-dimension vectors. The built-in ``baseline-v1`` encoder is fully
deterministic: an 8x8x3 block-mean thumbnail (192 values), 32-bin per-channel
histograms (96), and the 6 morphometric features, zero-padded to 512. External
backbones enter through precomputed store files with their own tag.
"""

from __future__ import annotations

import csv
import json
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .extraction import GlandInstance, MorphometricRecord

EMBEDDING_DIM = 512
DEFAULT_MAX_INSTANCES = 1000
BASELINE_ENCODER = "baseline-v1"

EMT_GENES = ("zeb1", "zeb2", "snai1", "snai2", "cdh1")
ALL_GENES = EMT_GENES + ("myc",)

# Channel normalization constants; with 8-bit inputs scaled to [0, 1] the
# normalized range is exactly [-2, 2], which anchors the histogram bins.
NORM_MEAN = (0.5, 0.5, 0.5)
NORM_STD = (0.25, 0.25, 0.25)
HIST_BINS = 32
HIST_RANGE = (-2.0, 2.0)
THUMB_EDGE = 8
CROP_EDGE = 224


class EmptyImage(ValueError):
    """Crop has zero pixels."""


class UnknownEncoderTag(KeyError):
    """No encoder registered under the requested tag."""


class UnknownCase(KeyError):
    """Case id absent from the label table."""


class UnlabeledSlide(KeyError):
    """A slide's case id carries no label for the requested task."""


class MissingGeneFlagWarning(UserWarning):
    """A gene flag was absent and treated as no-gain."""


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with the half-pixel-center convention, edge-clamped."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    src_y = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    src_x = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(src_y), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(src_x), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(src_y - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(src_x - x0, 0.0, 1.0)[None, :, None]
    if img.ndim == 2:
        img = img[..., None]
        squeeze = True
    else:
        squeeze = False
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out[..., 0] if squeeze else out


def preprocess_crop(
    crop: np.ndarray,
    edge: int = CROP_EDGE,
    mean: tuple[float, float, float] = NORM_MEAN,
    std: tuple[float, float, float] = NORM_STD,
) -> np.ndarray:
    """Resize an RGB crop to edge x edge x 3 and normalize channels.

    The resize stretches rather than letterboxes, deliberately removing
    absolute-size cues so downstream features see morphology only.
    """
    crop = np.asarray(crop)
    if crop.size == 0:
        raise EmptyImage("crop has no pixels")
    if crop.ndim != 3 or crop.shape[2] != 3:
        raise ValueError(f"crop must be (H, W, 3), got {crop.shape}")
    resized = bilinear_resize(crop.astype(np.float64) / 255.0, edge, edge)
    return (resized - np.asarray(mean)) / np.asarray(std)


@dataclass
class EmbeddingStore:
    """Per-slide instance embedding matrix with row provenance."""

    slide_id: str
    encoder_tag: str
    matrix: np.ndarray  # (n, dim) float32
    gland_ids: list[int]
    bboxes: list[tuple[int, int, int, int]]

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise ValueError("matrix must be 2-D")
        if len(self.gland_ids) != self.matrix.shape[0] or len(self.bboxes) != self.matrix.shape[0]:
            raise ValueError("row metadata length must match matrix rows")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("embedding matrix contains non-finite values")

    @property
    def n_instances(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def _baseline_encode(crop_tensor: np.ndarray, morpho: MorphometricRecord | None) -> np.ndarray:
    edge = crop_tensor.shape[0]
    block = edge // THUMB_EDGE
    thumb = crop_tensor[: THUMB_EDGE * block, : THUMB_EDGE * block].reshape(
        THUMB_EDGE, block, THUMB_EDGE, block, 3
    ).mean(axis=(1, 3))
    hists = []
    for c in range(3):
        counts, _ = np.histogram(crop_tensor[..., c], bins=HIST_BINS, range=HIST_RANGE)
        hists.append(counts / crop_tensor[..., c].size)
    morpho_vec = morpho.as_vector() if morpho is not None else np.zeros(6)
    parts = np.concatenate([thumb.ravel(), np.concatenate(hists), morpho_vec])
    out = np.zeros(EMBEDDING_DIM, dtype=np.float64)
    out[: parts.size] = parts
    return out


_ENCODERS = {BASELINE_ENCODER: _baseline_encode}


def encode_crops(
    encoder_tag: str,
    crops: list[np.ndarray],
    morphometric_records: list[MorphometricRecord | None] | None = None,
    slide_id: str = "",
    gland_ids: list[int] | None = None,
    bboxes: list[tuple[int, int, int, int]] | None = None,
) -> EmbeddingStore:
    """Encode preprocessed crops into a 512-d embedding store."""
    if encoder_tag not in _ENCODERS:
        raise UnknownEncoderTag(f"no encoder registered for tag {encoder_tag!r}")
    encode = _ENCODERS[encoder_tag]
    records = morphometric_records or [None] * len(crops)
    rows = [encode(crop, rec) for crop, rec in zip(crops, records)]
    matrix = (
        np.stack(rows).astype(np.float32) if rows else np.zeros((0, EMBEDDING_DIM), np.float32)
    )
    return EmbeddingStore(
        slide_id=slide_id,
        encoder_tag=encoder_tag,
        matrix=matrix,
        gland_ids=gland_ids if gland_ids is not None else list(range(1, len(crops) + 1)),
        bboxes=bboxes if bboxes is not None else [(0, 0, 0, 0)] * len(crops),
    )


def encode_instances(
    encoder_tag: str, instances: list[GlandInstance], slide_id: str = ""
) -> EmbeddingStore:
    """Preprocess and encode extracted gland instances."""
    crops = [preprocess_crop(inst.crop) for inst in instances]
    records = [inst.morphometrics for inst in instances]
    return encode_crops(
        encoder_tag,
        crops,
        morphometric_records=records,
        slide_id=slide_id or (instances[0].slide_id if instances else ""),
        gland_ids=[inst.gland_id for inst in instances],
        bboxes=[inst.bbox for inst in instances],
    )


# ---------------------------------------------------------------------------
# Store file: one JSON header line, then raw little-endian float32 rows.
# ---------------------------------------------------------------------------


def write_store(store: EmbeddingStore, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "slide_id": store.slide_id,
        "dim": store.dim,
        "n": store.n_instances,
        "encoder_tag": store.encoder_tag,
        "gland_ids": list(store.gland_ids),
        "bboxes": [list(b) for b in store.bboxes],
    }
    with path.open("wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(store.matrix, dtype="<f4").tobytes())
    return path


def read_store(path: Path | str) -> EmbeddingStore:
    with Path(path).open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    matrix = np.frombuffer(blob, dtype="<f4").reshape(header["n"], header["dim"]).copy()
    return EmbeddingStore(
        slide_id=header["slide_id"],
        encoder_tag=header["encoder_tag"],
        matrix=matrix,
        gland_ids=list(header["gland_ids"]),
        bboxes=[tuple(b) for b in header["bboxes"]],
    )


# ---------------------------------------------------------------------------
# Label table and task labels.
# ---------------------------------------------------------------------------


@dataclass
class LabelTable:
    """Per-case BCR status and per-gene copy-number gain flags.

    ``bcr`` is 0, 1, or None (unknown); gene flags are 0/1 or None when the
    column was blank for that case.
    """

    bcr: dict[str, int | None] = field(default_factory=dict)
    gene_gains: dict[str, dict[str, int | None]] = field(default_factory=dict)

    @property
    def case_ids(self) -> list[str]:
        return sorted(self.bcr)

    def add_case(self, case_id: str, bcr: int | None, gains: dict[str, int | None]):
        if case_id in self.bcr:
            raise ValueError(f"duplicate case id {case_id!r}")
        self.bcr[case_id] = bcr
        self.gene_gains[case_id] = {g: gains.get(g) for g in ALL_GENES}


def read_label_table(path: Path | str) -> LabelTable:
    """Parse the label CSV (case_id, bcr, zeb1, zeb2, snai1, snai2, cdh1, myc)."""
    table = LabelTable()
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            case_id = row["case_id"].strip()

            def parse(value: str | None) -> int | None:
                value = (value or "").strip()
                return None if value in ("", "unknown", "na") else int(value)

            table.add_case(
                case_id,
                parse(row.get("bcr")),
                {g: parse(row.get(g)) for g in ALL_GENES},
            )
    return table


def write_label_table(table: LabelTable, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id"] + ["bcr"] + list(ALL_GENES))
        for case_id in table.case_ids:
            gains = table.gene_gains[case_id]
            fmt = lambda v: "" if v is None else str(v)
            writer.writerow(
                [case_id, fmt(table.bcr[case_id])] + [fmt(gains[g]) for g in ALL_GENES]
            )
    return path


def derive_emt_label(table: LabelTable, case_id: str) -> int:
    """Binary EMT status: 1 if any EMT-related gene shows a copy-number gain.

    Missing flags count as no-gain and raise :class:`MissingGeneFlagWarning`.
    """
    if case_id not in table.gene_gains:
        raise UnknownCase(f"case {case_id!r} not in label table")
    gains = table.gene_gains[case_id]
    result = 0
    for gene in EMT_GENES:
        flag = gains.get(gene)
        if flag is None:
            warnings.warn(
                f"case {case_id!r}: gene flag {gene!r} missing, treated as no-gain",
                MissingGeneFlagWarning,
                stacklevel=2,
            )
            continue
        result |= int(bool(flag))
    return result


def task_label(table: LabelTable, case_id: str, task: str) -> int | None:
    """Label for one of the binary tasks: bcr, emt, or myc."""
    if case_id not in table.bcr:
        raise UnknownCase(f"case {case_id!r} not in label table")
    if task == "bcr":
        return table.bcr[case_id]
    if task == "emt":
        return derive_emt_label(table, case_id)
    if task == "myc":
        flag = table.gene_gains[case_id].get("myc")
        return None if flag is None else int(bool(flag))
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# MIL bag assembly.
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingBag:
    """Slide-level instance set, capped and zero-padded to max_instances."""

    case_id: str
    slide_id: str
    label: int
    instances: np.ndarray  # (max_instances, dim) float64
    validity: np.ndarray  # (max_instances,) bool
    gland_ids: list[int]  # one per valid row, in row order

    @property
    def n_valid(self) -> int:
        return int(self.validity.sum())


def _slide_rng(seed: int, slide_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(slide_id.encode("utf-8"))])


def assemble_bags(
    stores: list[EmbeddingStore],
    table: LabelTable,
    task: str = "bcr",
    max_instances: int = DEFAULT_MAX_INSTANCES,
    seed: int = 0,
    slide_to_case: dict[str, str] | None = None,
) -> list[EmbeddingBag]:
    """Group each store's rows into one bag, subsampling above the cap.

    Subsampling is uniform without replacement with a per-slide generator
    derived from (seed, slide_id), so bag contents do not depend on store
    ordering. Slides whose case carries no label for the task raise
    :class:`UnlabeledSlide`.
    """
    bags = []
    for store in stores:
        case_id = (slide_to_case or {}).get(store.slide_id, store.slide_id)
        try:
            label = task_label(table, case_id, task)
        except UnknownCase:
            raise UnlabeledSlide(f"slide {store.slide_id!r}: case {case_id!r} unlabeled")
        if label is None:
            raise UnlabeledSlide(f"slide {store.slide_id!r}: no {task} label for {case_id!r}")
        n = store.n_instances
        if n > max_instances:
            rng = _slide_rng(seed, store.slide_id)
            keep = np.sort(rng.choice(n, size=max_instances, replace=False))
        else:
            keep = np.arange(n)
        matrix = np.zeros((max_instances, store.dim), dtype=np.float64)
        validity = np.zeros(max_instances, dtype=bool)
        matrix[: keep.size] = store.matrix[keep].astype(np.float64)
        validity[: keep.size] = True
        bags.append(
            EmbeddingBag(
                case_id=case_id,
                slide_id=store.slide_id,
                label=int(label),
                instances=matrix,
                validity=validity,
                gland_ids=[store.gland_ids[i] for i in keep],
            )
        )
    return bags


def augment_crop(crop: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal/vertical flips plus per-channel color jitter.

    Produces the positive view paired with the original crop for metric
    learning; applied before preprocessing and encoding.
    """
    out = np.asarray(crop, dtype=np.float64)
    if rng.random() < 0.5:
        out = out[:, ::-1]
    if rng.random() < 0.5:
        out = out[::-1, :]
    gain = rng.uniform(0.9, 1.1, 3)
    offset = rng.uniform(-10.0, 10.0, 3)
    return np.clip(np.rint(out * gain + offset), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Grid-tiling arm: fixed-size non-overlapping tiles over detected tissue.
# ---------------------------------------------------------------------------


def grid_tiles(
    slide, tile_px: int = CROP_EDGE, tissue_fraction: float = 0.5
) -> tuple[list[np.ndarray], list[tuple[int, int, int, int]]]:
    """Non-overlapping tiles whose stain-heuristic non-background share
    is at least ``tissue_fraction``; trailing partial tiles are dropped."""
    from .segmenters import StainThresholds, stain_densities

    thr = StainThresholds()
    crops, boxes = [], []
    px = slide.pixels
    for y in range(0, slide.height_px - tile_px + 1, tile_px):
        for x in range(0, slide.width_px - tile_px + 1, tile_px):
            tile = px[y : y + tile_px, x : x + tile_px]
            dens, total_od = stain_densities(tile)
            tissue = (dens[..., 0] >= thr.epithelium_hematoxylin) | (
                (total_od <= thr.lumen_total_od)
                & ((tile[..., 2].astype(np.float64) - tile[..., 0]) >= thr.lumen_blue_tint)
            )
            if tissue.mean() >= tissue_fraction:
                crops.append(tile)
                boxes.append((x, y, tile_px, tile_px))
    return crops, boxes
