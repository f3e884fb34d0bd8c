"""Command-line entry points.

Subcommands cover the full pipeline: ``synth`` (test substrates),
``segment`` -> ``extract`` -> ``embed`` -> ``cl-train`` / ``cluster`` /
``mil-train`` / ``mil-bench`` -> ``score`` -> ``render``. Every command
reads the shared JSON config (flags override individual keys), writes the
owning module's file formats, and pairs report CSVs with rendered figures.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Failures emit one machine-readable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import (
    clustering,
    contrastive,
    embeddings,
    extraction,
    figures,
    maps,
    mil,
    raster,
    segmenters,
    synth,
)
from .config import ConfigError, PipelineConfig, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (
    FileNotFoundError,
    KeyError,
    raster.SlideSmallerThanPatch,
    raster.MissingPatch,
    raster.ShapeMismatch,
    segmenters.BadPatchSize,
    segmenters.ExternalModelUnavailable,
    embeddings.EmptyImage,
    embeddings.UnknownEncoderTag,
    embeddings.UnknownCase,
    embeddings.UnlabeledSlide,
    mil.InsufficientGroups,
    mil.UnstratifiableLabels,
    mil.MissingHead,
    synth.PlacementFailure,
)
_NUMERIC_ERRORS = (
    contrastive.DegenerateBatch,
    contrastive.EmptySplit,
    contrastive.DimMismatch,
    clustering.KTooLarge,
    clustering.EmptyTrainingSet,
    mil.AllPaddedBag,
    mil.SingleClassTrainingSet,
    mil.SingleClass,
    FloatingPointError,
)


# ---------------------------------------------------------------------------
# Shared helpers.
# ---------------------------------------------------------------------------


def _config_from(args) -> PipelineConfig:
    overrides = {}
    for key in ("threshold", "downsample_factor", "min_area_px", "seed", "threads",
                "patch_size_px", "stride_px", "bag_cap"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    return load_config(getattr(args, "config", None), overrides)


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _load_stores(paths: list[str]) -> list[embeddings.EmbeddingStore]:
    stores = []
    for pattern in paths:
        p = Path(pattern)
        if p.is_dir():
            found = sorted(p.glob("*.store"))
            if not found:
                raise FileNotFoundError(f"no .store files under {p}")
            stores.extend(embeddings.read_store(f) for f in found)
        else:
            stores.append(embeddings.read_store(p))
    return stores


def _instances_from_pipeline(
    slide_png: str, seg_header: str, nuclei_header: str | None, cfg: PipelineConfig
) -> tuple[raster.SlideRaster, list[extraction.GlandInstance]]:
    slide = raster.read_slide(slide_png)
    prob = raster.read_probability_map(seg_header)
    mask_set = raster.binarize(prob, threshold=cfg.threshold)
    nuclei_mask = None
    if nuclei_header:
        nuclei_prob = raster.read_probability_map(nuclei_header)
        nuclei_mask = nuclei_prob.plane(raster.NUCLEI) > cfg.threshold
    instances = extraction.extract_instances(
        mask_set,
        slide,
        min_area_px=cfg.min_area_px,
        margin_px=cfg.margin_px,
        nuclei_mask=nuclei_mask,
        connectivity=cfg.connectivity,
    )
    return slide, instances


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config_from(args)
    out = Path(args.out)
    if args.kind == "slide":
        result = synth.synth_slide(seed=cfg.seed, n_glands=args.glands, size=args.size)
        png = synth.write_synth_slide(result, out)
        print(f"wrote {png} with {len(result.glands)} glands")
        return EXIT_OK
    bags = synth.synth_bags(
        seed=cfg.seed,
        n_bags=args.bags,
        witness_rate=args.witness_rate,
        dim=args.dim,
        max_instances=args.max_instances,
    )
    out.mkdir(parents=True, exist_ok=True)
    table = embeddings.LabelTable()
    witness_map = {}
    for bag, flags in zip(bags.bags, bags.witness):
        store = embeddings.EmbeddingStore(
            slide_id=bag.slide_id,
            encoder_tag="synthetic",
            matrix=bag.instances[bag.validity].astype(np.float32),
            gland_ids=list(bag.gland_ids),
            bboxes=[(0, 0, 0, 0)] * bag.n_valid,
        )
        embeddings.write_store(store, out / f"{bag.slide_id}.store")
        table.add_case(bag.slide_id, bag.label, {})
        witness_map[bag.slide_id] = [int(g) for g, f in zip(bag.gland_ids, flags) if f]
    embeddings.write_label_table(table, out / "labels.csv")
    (out / "witness.json").write_text(json.dumps(witness_map, sort_keys=True))
    print(f"wrote {len(bags.bags)} bags under {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# segment
# ---------------------------------------------------------------------------


def _build_descriptor(args, slide_dir: Path, slide_id: str, patch_size: int):
    if args.segmenter == "oracle":
        labels, nuclei = synth.read_truth_planes(slide_dir, slide_id)
        return segmenters.oracle_descriptor(labels, nuclei, patch_size_px=patch_size)
    if args.segmenter == "stain_heuristic":
        return segmenters.SegmenterDescriptor(kind="stain_heuristic", patch_size_px=patch_size)
    return segmenters.SegmenterDescriptor(
        kind="external", patch_size_px=patch_size, model_path=args.segmenter_model
    )


def cmd_segment(args) -> int:
    cfg = _config_from(args)
    slide = raster.read_slide(args.slide)
    slide_dir = Path(args.slide).parent
    descriptor = _build_descriptor(args, slide_dir, slide.slide_id, cfg.patch_size_px)
    grid = raster.plan_patch_grid(
        slide.width_px, slide.height_px, cfg.patch_size_px, cfg.stride_px
    )

    def segment_one(origin):
        x, y = origin
        patch = slide.patch(x, y, cfg.patch_size_px)
        return origin, (
            segmenters.segment_patch(descriptor, patch, origin),
            segmenters.segment_nuclei(descriptor, patch, origin),
        )

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            produced = dict(pool.map(segment_one, grid.origins))
    else:
        produced = dict(map(segment_one, grid.origins))

    seg_maps = {origin: pair[0] for origin, pair in produced.items()}
    nuc_maps = {origin: pair[1] for origin, pair in produced.items()}
    stitched = raster.stitch_predictions(
        grid, seg_maps, slide.width_px, slide.height_px, cfg.downsample_factor
    )
    nuclei = raster.stitch_predictions(
        grid, nuc_maps, slide.width_px, slide.height_px, cfg.downsample_factor
    )
    if args.fuse_with:
        stitched = raster.fuse_probabilities(stitched, raster.read_probability_map(args.fuse_with))
    out = Path(args.out)
    header = raster.write_probability_map(stitched, out, f"{slide.slide_id}_seg", cfg.threshold)
    raster.write_probability_map(nuclei, out, f"{slide.slide_id}_nuclei", cfg.threshold)
    print(f"wrote {header} ({len(grid.origins)} patches, d={cfg.downsample_factor})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------


def cmd_extract(args) -> int:
    cfg = _config_from(args)
    slide, instances = _instances_from_pipeline(args.slide, args.seg, args.nuclei, cfg)
    manifest = extraction.export_instances(
        instances, Path(args.out), slide=slide, raw_crops=args.raw_crops
    )
    print(f"wrote {manifest} with {len(instances)} instances")
    return EXIT_OK


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------


def _load_crops_from_manifest(manifest_path: Path) -> tuple[list, list, list, list, str]:
    from PIL import Image

    rows = extraction.read_manifest(manifest_path)
    crops, records, gland_ids, bboxes = [], [], [], []
    slide_id = rows[0]["slide_id"] if rows else manifest_path.stem.replace("_manifest", "")
    base = manifest_path.parent / slide_id
    for row in rows:
        with Image.open(base / f"{row['gland_id']}.png") as img:
            crops.append(np.asarray(img.convert("RGB"), dtype=np.uint8))
        m = row["morphometrics"]
        records.append(extraction.MorphometricRecord(**m))
        gland_ids.append(row["gland_id"])
        bboxes.append(tuple(row["bbox"]))
    return crops, records, gland_ids, bboxes, slide_id


def cmd_embed(args) -> int:
    cfg = _config_from(args)
    if args.tiling == "grid":
        slide = raster.read_slide(args.slide)
        crops, boxes = embeddings.grid_tiles(slide, tile_px=cfg.crop_edge)
        processed = [embeddings.preprocess_crop(c) for c in crops]
        store = embeddings.encode_crops(
            cfg.encoder_tag, processed, slide_id=slide.slide_id, bboxes=boxes
        )
    else:
        crops, records, gland_ids, bboxes, slide_id = _load_crops_from_manifest(
            Path(args.manifest)
        )
        processed = [embeddings.preprocess_crop(c, edge=cfg.crop_edge) for c in crops]
        store = embeddings.encode_crops(
            cfg.encoder_tag, processed, records, slide_id, gland_ids, bboxes
        )
    if args.head:
        checkpoint = contrastive.read_checkpoint(args.head)
        store = contrastive.project_embeddings(checkpoint.head, store)
    path = embeddings.write_store(store, args.out)
    print(f"wrote {path} ({store.n_instances} x {store.dim}, tag {store.encoder_tag})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# cl-train
# ---------------------------------------------------------------------------


def cmd_cl_train(args) -> int:
    cfg = _config_from(args)
    rows, gland_keys = [], []
    next_key = 0
    rng = np.random.default_rng([cfg.seed, 41])
    for manifest in args.manifest:
        crops, records, gland_ids, _, slide_id = _load_crops_from_manifest(Path(manifest))
        for crop, record in zip(crops, records):
            next_key += 1
            views = [crop] + [
                embeddings.augment_crop(crop, rng) for _ in range(args.views - 1)
            ]
            for view in views:
                processed = embeddings.preprocess_crop(view, edge=cfg.crop_edge)
                rows.append(embeddings._baseline_encode(processed, record))
                gland_keys.append(next_key)
    matrix = np.asarray(rows)
    result = contrastive.train_projection_head(
        matrix,
        np.asarray(gland_keys),
        epochs=args.epochs,
        seed=cfg.seed,
        margin=cfg.cl_margin,
        batch_size=cfg.cl_batch_size,
        learn_rate=cfg.cl_learn_rate,
        hidden_dim=cfg.cl_hidden_dim,
        out_dim=cfg.cl_projection_dim,
        checkpoint_epochs=tuple(cfg.cl_checkpoints),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ckpt in result.checkpoints:
        contrastive.write_checkpoint(ckpt, out / f"checkpoint_epoch{ckpt.epoch}.ckpt")
    _write_csv(
        out / "history.csv",
        ["epoch", "train_loss", "val_loss"],
        [{k: row[k] for k in ("epoch", "train_loss", "val_loss")} for row in result.history],
    )
    figures.training_history_figure(result.history, out / "history.png")
    print(f"wrote {len(result.checkpoints)} checkpoints under {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# cluster
# ---------------------------------------------------------------------------


def cmd_cluster(args) -> int:
    cfg = _config_from(args)
    stores = _load_stores(args.store)
    if args.head:
        checkpoint = contrastive.read_checkpoint(args.head)
        stores = [contrastive.project_embeddings(checkpoint.head, s) for s in stores]
    matrix = np.concatenate([s.matrix.astype(np.float64) for s in stores])
    slide_ids = [s.slide_id for s in stores for _ in range(s.n_instances)]
    gland_ids = [g for s in stores for g in s.gland_ids]
    k_range = range(cfg.cluster_k_min, cfg.cluster_k_max + 1)
    if args.k == "auto":
        chosen_k, model = clustering.select_cluster_count(
            matrix, k_range, linkage=cfg.cluster_linkage, criterion=cfg.cluster_criterion
        )
    else:
        chosen_k = int(args.k)
        model = clustering.hac_fit(matrix, chosen_k, linkage=cfg.cluster_linkage, k_range=k_range)
    out = Path(args.out)
    clustering.write_assignments(out / "assignments.csv", slide_ids, gland_ids, model.labels)
    _write_csv(
        out / "variance.csv",
        ["k", "between", "within", "ch_index", "raw_ratio"],
        [{"k": k, **model.variance_by_k[k]} for k in sorted(model.variance_by_k)],
    )
    figures.variance_ratio_figure(model.variance_by_k, chosen_k, out / "variance.png")
    if chosen_k >= 2:
        dendro = clustering.centroid_dendrogram(model, linkage=cfg.cluster_linkage)
        clustering.write_dendrogram(out / "dendrogram.json", dendro)
        figures.dendrogram_figure(dendro, out / "dendrogram.png")
    coords = clustering.project_2d(matrix)
    figures.embedding_scatter_figure(
        coords, out / "embedding_scatter.png", cluster_labels=model.labels,
        title=f"{chosen_k} clusters",
    )
    print(f"wrote cluster outputs under {out} (k={chosen_k})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# mil-train / mil-bench / score
# ---------------------------------------------------------------------------


def _assemble_from_dir(stores_dir: str, labels_csv: str, task: str, cfg: PipelineConfig):
    stores = _load_stores([stores_dir])
    table = embeddings.read_label_table(labels_csv)
    return embeddings.assemble_bags(
        stores, table, task=task, max_instances=cfg.bag_cap, seed=cfg.seed
    )


def cmd_mil_train(args) -> int:
    cfg = _config_from(args)
    bags = _assemble_from_dir(args.stores, args.labels, args.task, cfg)
    hyperparams = {
        "batch_size": args.batch_size,
        "learn_rate": args.learn_rate,
        "epochs": args.epochs,
    }
    head, history = mil.train_head(
        args.head, bags, hyperparams, seed=cfg.seed, hidden_dim=cfg.mil_hidden_dim
    )
    mil.write_mil_head(
        head, args.out, metadata={"task": args.task, "seed": cfg.seed, **hyperparams}
    )
    print(f"wrote {args.out} (final train loss {history[-1]['train_loss']:.4f})")
    return EXIT_OK


def cmd_mil_bench(args) -> int:
    cfg = _config_from(args)
    arms = []
    for spec in args.arm:
        tiling, encoder, stores_dir = spec.split(":", 2)
        bags = _assemble_from_dir(stores_dir, args.labels, args.task, cfg)
        arms.append(mil.BenchmarkArm(tiling_mode=tiling, encoder_tag=encoder, bags=bags))
    if args.shuffled_control:
        base = arms[0]
        arms.append(
            mil.BenchmarkArm(
                tiling_mode=f"{base.tiling_mode}-shuffled",
                encoder_tag=base.encoder_tag,
                bags=synth.shuffle_bag_labels(base.bags, seed=cfg.seed),
            )
        )
    out = Path(args.out)
    head_kinds = tuple(args.heads.split(","))
    rows = []
    for arm in arms:
        for head_kind in head_kinds:
            arm_rows, final_heads = mil.evaluate_arm(
                arm,
                args.task,
                head_kind,
                seed=cfg.seed,
                sweep=cfg.sweep(),
                n_repeats=cfg.mil_repeats,
                hidden_dim=cfg.mil_hidden_dim,
                threads=cfg.threads,
            )
            rows.extend(arm_rows)
            if args.save_heads:
                heads_dir = out / "heads"
                for idx, head in enumerate(final_heads):
                    t, r = divmod(idx, cfg.mil_repeats)
                    mil.write_mil_head(
                        head,
                        heads_dir / f"{arm.tiling_mode}_{arm.encoder_tag}_{head_kind}_t{t}_r{r}.mil",
                        metadata={"fold": t, "repeat": r, "task": args.task},
                    )
    mil.write_benchmark_csv(rows, out / "benchmark.csv")
    figures.benchmark_auc_figure(rows, out / "benchmark.png")
    print(f"wrote {out / 'benchmark.csv'} ({len(rows)} rows)")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _config_from(args)
    bags = _assemble_from_dir(args.stores, args.labels, args.task, cfg)
    head_paths = sorted(Path(args.heads).glob(args.heads_glob))
    heads = []
    for p in head_paths:
        head, _ = mil.read_mil_head(p)
        heads.append(head)
    scores = mil.ensemble_instance_scores(heads, bags, expected_heads=args.expected_heads)
    out = Path(args.out)
    rows = []
    for i in range(scores.scores.shape[0]):
        rows.append(
            {
                "slide_id": scores.slide_ids[i],
                "gland_id": scores.gland_ids[i],
                "mean_score": float(scores.scores[i].mean()),
                "category": int(scores.categories[i]),
            }
        )
    _write_csv(out / "scores.csv", ["slide_id", "gland_id", "mean_score", "category"], rows)
    stores = _load_stores([args.stores])
    matrix = np.concatenate([s.matrix.astype(np.float64) for s in stores])
    coords = clustering.project_2d(matrix)
    figures.embedding_scatter_figure(
        coords, out / "score_scatter.png", scores=scores.categories.astype(float),
        title="ensemble evidence categories",
    )
    print(f"wrote {out / 'scores.csv'} ({len(rows)} instances, {len(heads)} models)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


def cmd_render(args) -> int:
    cfg = _config_from(args)
    slide, instances = _instances_from_pipeline(args.slide, args.seg, args.nuclei, cfg)
    if args.mode == "cluster":
        labels = {}
        with Path(args.assignments).open(newline="") as fh:
            for row in csv.DictReader(fh):
                if row["slide_id"] == slide.slide_id:
                    labels[int(row["gland_id"])] = int(row["cluster"])
        canvas = maps.render_cluster_map(slide, instances, labels, alpha=cfg.map_alpha)
    else:
        scores = {}
        with Path(args.scores).open(newline="") as fh:
            for row in csv.DictReader(fh):
                if row["slide_id"] == slide.slide_id:
                    scores[int(row["gland_id"])] = (
                        float(row["category"]) if args.use_category else float(row["mean_score"])
                    )
        canvas = maps.render_score_map(slide, instances, scores, alpha=cfg.map_alpha)
    path = maps.write_overlay(canvas, args.out)
    print(f"wrote {path} ({len(canvas.painted_gland_ids)} glands painted)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser.
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glandtiler",
        description="Gland-centric tiling, phenotyping, and attention-MIL for slide rasters.",
    )
    parser.add_argument("--config", help="JSON config file (defaults otherwise)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic slides or MIL bags")
    p.add_argument("--kind", choices=["slide", "bags"], default="slide")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--glands", type=int, default=12)
    p.add_argument("--size", type=int, default=2048)
    p.add_argument("--bags", type=int, default=200)
    p.add_argument("--witness-rate", type=float, default=0.1)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--max-instances", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="segment a slide and stitch probability maps")
    p.add_argument("--slide", required=True)
    p.add_argument("--segmenter", choices=["oracle", "stain_heuristic", "external"],
                   default="stain_heuristic")
    p.add_argument("--segmenter-model", default=None)
    p.add_argument("--fuse-with", default=None, help="second probability-map header to multiply in")
    p.add_argument("--downsample-factor", type=int, default=None, dest="downsample_factor")
    p.add_argument("--patch-size", type=int, default=None, dest="patch_size_px")
    p.add_argument("--stride", type=int, default=None, dest="stride_px")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("extract", help="extract gland instances from stitched maps")
    p.add_argument("--slide", required=True)
    p.add_argument("--seg", required=True, help="probability-map header JSON")
    p.add_argument("--nuclei", default=None, help="nuclei probability-map header JSON")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--min-area", type=int, default=None, dest="min_area_px")
    p.add_argument("--raw-crops", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("embed", help="encode crops (semantic) or grid tiles into a store")
    p.add_argument("--tiling", choices=["semantic", "grid"], default="semantic")
    p.add_argument("--manifest", help="instance manifest (semantic tiling)")
    p.add_argument("--slide", help="slide PNG (grid tiling)")
    p.add_argument("--head", default=None, help="projection-head checkpoint to apply")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("cl-train", help="train the contrastive projection head")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cl_train)

    p = sub.add_parser("cluster", help="cluster embeddings and emit reports")
    p.add_argument("--store", action="append", required=True)
    p.add_argument("--head", default=None, help="projection-head checkpoint to apply first")
    p.add_argument("--k", default="auto")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("mil-train", help="train one MIL head")
    p.add_argument("--stores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--task", choices=["bcr", "emt", "myc"], default="bcr")
    p.add_argument("--head", choices=["gated", "paw"], default="paw")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--learn-rate", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--bag-cap", type=int, default=None, dest="bag_cap")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mil_train)

    p = sub.add_parser("mil-bench", help="benchmark tiling modes and encoders")
    p.add_argument("--arm", action="append", required=True,
                   help="tiling:encoder:stores-dir (repeatable)")
    p.add_argument("--labels", required=True)
    p.add_argument("--task", choices=["bcr", "emt", "myc"], default="bcr")
    p.add_argument("--heads", default="gated,paw")
    p.add_argument("--shuffled-control", action="store_true")
    p.add_argument("--save-heads", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--bag-cap", type=int, default=None, dest="bag_cap")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mil_bench)

    p = sub.add_parser("score", help="ensemble per-instance evidence scores")
    p.add_argument("--heads", required=True, help="directory of trained head files")
    p.add_argument("--heads-glob", default="*.mil")
    p.add_argument("--expected-heads", type=int, default=15)
    p.add_argument("--stores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--task", choices=["bcr", "emt", "myc"], default="bcr")
    p.add_argument("--bag-cap", type=int, default=None, dest="bag_cap")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("render", help="render cluster or score overlay maps")
    p.add_argument("--slide", required=True)
    p.add_argument("--seg", required=True)
    p.add_argument("--nuclei", default=None)
    p.add_argument("--mode", choices=["cluster", "score"], required=True)
    p.add_argument("--assignments", help="assignments.csv (cluster mode)")
    p.add_argument("--scores", help="scores.csv (score mode)")
    p.add_argument("--use-category", action="store_true",
                   help="paint ensemble categories instead of mean scores")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        for violation in exc.violations:
            print(json.dumps({"error": "ConfigError", "message": violation}), file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
