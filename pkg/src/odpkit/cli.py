"""Command-line entry point.

Every subcommand reads an optional YAML/JSON config file (``--config``);
flags override config values. Each run writes its outputs plus a
``manifest.json`` (config hash, seed, tool version, per-stage counts) into
``--out``.

Exit codes: 0 success, 2 configuration/usage error, 3 I/O error,
4 processing error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .annotations import (
    AnnotatedDataset,
    Annotation,
    ClassLabel,
    ImageRecord,
    convert_labels,
    parse_yolo,
    parse_coco_results,
    read_coco,
    serialize_coco_results,
    split_dataset,
    write_coco,
    write_label_files,
)
from .augmentation import (
    FpCrop,
    MosaicSpec,
    PasteConfig,
    build_mosaics,
    generate_pasted_dataset,
    insert_opposite_class_object,
    load_object_library,
)
from .consensus import ConsensusConfig, build_consensus
from .detectors import DetectorSpec, build_detector, run_detection_manager
from .evaluation import (
    compute_map,
    confusion_matrix,
    extract_fp_fn,
    format_metric_table,
    match_detections,
    pool_fp_fn,
)
from .fusion import run_filter_chain, stage_from_dict
from .imaging import crop, load_camera_table, load_image, read_exif, save_image

log = logging.getLogger("odpkit")

EXIT_CONFIG, EXIT_IO, EXIT_PROCESSING = 2, 3, 4
# flags that do not change results
_UNHASHED = {"config", "out", "workers", "verbose"}


class ConfigError(ValueError):
    pass


# --- config + manifest ------------------------------------------------------


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        cfg = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a mapping")
    cfg.setdefault("_base", str(Path(path).resolve().parent))
    return cfg


def _resolve(cfg: dict, value: str) -> str:
    p = Path(value)
    if p.is_absolute() or "_base" not in cfg:
        return str(p)
    return str(Path(cfg["_base"]) / p)


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return dict(sec)


def _seed(args, cfg: dict, required: bool) -> int | None:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None and required:
        raise ConfigError(f"'{args.command}' is randomized: pass --seed or set 'seed' in the config")
    return None if seed is None else int(seed)


def _workers(args, cfg: dict) -> int:
    w = args.workers if args.workers is not None else cfg.get("workers", 1)
    if int(w) < 1:
        raise ConfigError("--workers must be >= 1")
    return int(w)


def config_hash(effective: dict) -> str:
    cfg = {k: v for k, v in effective.get("config", {}).items() if k != "_base"}
    canonical = json.dumps({**effective, "config": cfg}, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_manifest(out: Path, command: str, effective: dict, seed: int | None, counts: dict, outputs: list[str]) -> None:
    manifest = {
        "tool": "odpkit",
        "version": __version__,
        "command": command,
        "config_hash": config_hash(effective),
        "seed": seed,
        "counts": counts,
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _image_root(args, cfg: dict) -> Path:
    if getattr(args, "image_root", None):
        return Path(args.image_root)
    if cfg.get("image_root"):
        return Path(_resolve(cfg, cfg["image_root"]))
    return Path(".")


def _named_paths(values: Sequence[str] | None, cfg_entries: dict | None, cfg: dict) -> dict[str, str]:
    """Merge ``name=path`` flags over a ``{name: path}`` config mapping."""
    out = {k: _resolve(cfg, v) for k, v in (cfg_entries or {}).items()}
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"expected NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = path
    return out


def _load_predictions(paths: dict[str, str]) -> dict[str, list[Annotation]]:
    return {name: parse_coco_results(Path(p).read_bytes(), source=name) for name, p in sorted(paths.items())}


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _class_id(classes: Sequence[ClassLabel], key) -> int:
    for c in classes:
        if key == c.name or key == c.id or str(key) == str(c.id):
            return c.id
    raise ConfigError(f"unknown class {key!r}")


# --- subcommands ------------------------------------------------------------


def cmd_label(args, cfg: dict) -> dict:
    images_ds = read_coco(args.images)
    root = _image_root(args, cfg)
    specs = []
    for raw in cfg.get("detectors") or []:
        params = dict(raw.get("params") or {})
        for key in ("path", "ground_truth"):
            if isinstance(params.get(key), str):
                params[key] = _resolve(cfg, params[key])
        try:
            specs.append(DetectorSpec(raw["name"], raw["kind"], params))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad detector entry {raw!r}: {exc}") from exc
    for name, path in _named_paths(args.pred, None, cfg).items():
        specs.append(DetectorSpec(name, "file_backed", {"path": path}))
    try:
        stages = [stage_from_dict(s) for s in (cfg.get("filters") or [])]
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    detectors = [build_detector(s, root) for s in specs]

    workers = _workers(args, cfg)
    managed = run_detection_manager(images_ds.images, detectors, workers=workers)
    bounds = {im.id: im.bounds for im in images_ds.images if im.bounds is not None}
    chain = run_filter_chain(managed.detections, stages, bounds)

    proposals = AnnotatedDataset(images_ds.images, chain.detections, images_ds.classes).renumbered()
    out = Path(args.out)
    write_coco(proposals, out / "proposals.json")
    outputs = ["proposals.json"]
    if args.format == "yolo":
        write_label_files(convert_labels(proposals, "yolo"), out / "labels")
        outputs.append("labels/")
    counts = {
        "images": len(images_ds.images),
        "detectors": len(detectors),
        "failures": len(managed.failures),
        "stages": {name: n for name, n in chain.counts},
    }
    _write_json(
        out / "report.json",
        {**chain.report(), "failures": [f.__dict__ for f in managed.failures]},
    )
    outputs.append("report.json")
    return {"counts": counts, "outputs": outputs, "seed": _seed(args, cfg, False)}


def cmd_fpfn(args, cfg: dict) -> dict:
    gt = read_coco(args.gt)
    sec = _section(cfg, "evaluation")
    conf = args.confidence if args.confidence is not None else float(sec.get("confidence", 0.3))
    merge_iou = args.merge_iou if args.merge_iou is not None else float(sec.get("merge_iou", 0.3))
    preds = _load_predictions(_named_paths(args.pred, cfg.get("predictions"), cfg))
    if not preds:
        raise ConfigError("fpfn needs at least one --pred NAME=PATH")
    names = gt.class_names()
    out = Path(args.out)

    per_model = {}
    for name, dets in preds.items():
        per_model[name] = extract_fp_fn(dets, gt, conf).counts(names)
    pooled = pool_fp_fn(preds, gt, conf, merge_iou)
    (out / "fp.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "fp.json").write_bytes(serialize_coco_results(pooled.false_positives))
    write_coco(AnnotatedDataset(gt.images, pooled.false_negatives, gt.classes), out / "fn.json")
    outputs = ["fp.json", "fn.json", "fpfn_report.json"]

    if args.image_root or cfg.get("image_root"):
        root = _image_root(args, cfg)
        index = gt.image_index()
        for kind, anns in (("fp", pooled.false_positives), ("fn", pooled.false_negatives)):
            for i, a in enumerate(anns, start=1):
                img = load_image(Path(root) / index[a.image_id].file_name)
                save_image(crop(img, a.box), out / "crops" / kind / names[a.category_id] / f"{a.image_id}_{i:05d}.png")
        outputs.append("crops/")
    report = {"per_model": per_model, "merged": pooled.counts(names), "confidence": conf, "merge_iou": merge_iou}
    _write_json(out / "fpfn_report.json", report)
    counts = {"fp": len(pooled.false_positives), "fn": len(pooled.false_negatives)}
    return {"counts": counts, "outputs": outputs, "seed": None}


def cmd_mosaic(args, cfg: dict) -> dict:
    seed = _seed(args, cfg, True)
    images = read_coco(args.images)
    sec = _section(cfg, "mosaic")
    if args.variant:
        sec["variant"] = args.variant
    sec["seed"] = seed
    try:
        spec = MosaicSpec(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad mosaic config: {exc}") from exc
    root = _image_root(args, cfg)
    index = images.image_index()
    fps = parse_coco_results(Path(args.fp).read_bytes())
    cache: dict[int, Any] = {}
    crops = []
    for d in fps:
        if d.image_id not in cache:
            cache[d.image_id] = load_image(root / index[d.image_id].file_name)
        crops.append(FpCrop(crop(cache[d.image_id], d.box), d.category_id, d.image_id))
    mosaics = build_mosaics(crops, spec)
    objects = load_object_library(args.objects, images.classes) if args.objects else []

    out = Path(args.out)
    names = images.class_names()
    records, anns = [], []
    for i, m in enumerate(mosaics, start=1):
        raster = m.raster
        if objects:
            raster, ann = insert_opposite_class_object(raster, m.class_id, objects, seed=seed * 1_000_003 + i, image_id=i)
            anns.append(ann)
        fname = f"mosaic_{names[m.class_id]}_{i:04d}.png"
        save_image(raster, out / "mosaics" / fname)
        records.append(ImageRecord(i, fname, raster.shape[1], raster.shape[0]))
    write_coco(AnnotatedDataset(records, anns, images.classes).renumbered(), out / "mosaics.json")
    per_class: dict[str, int] = {}
    for m in mosaics:
        per_class[names[m.class_id]] = per_class.get(names[m.class_id], 0) + 1
    counts = {"fp_crops": len(crops), "mosaics": len(mosaics), "per_class": per_class, "inserted_objects": len(anns)}
    return {"counts": counts, "outputs": ["mosaics.json", "mosaics/"], "seed": seed}


def cmd_paste(args, cfg: dict) -> dict:
    seed = _seed(args, cfg, True)
    backgrounds = read_coco(args.backgrounds)
    classes = backgrounds.classes
    root = _image_root(args, cfg)
    sec = _section(cfg, "paste")
    try:
        mix = {_class_id(classes, k): float(v) for k, v in (sec.pop("class_mix", None) or {}).items()}
        if "objects_per_image" in sec:
            sec["objects_per_image"] = tuple(sec["objects_per_image"])
        if args.margin is not None:
            sec["margin"] = args.margin
        pcfg = PasteConfig(class_mix=mix, seed=seed, **sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad paste config: {exc}") from exc

    images = list(backgrounds.images)
    if args.exif:
        table = load_camera_table(args.camera_table) if args.camera_table else None
        images = [
            im if im.flight_meta is not None else replace(im, flight_meta=read_exif(root / im.file_name, table))
            for im in images
        ]
    objects = load_object_library(args.objects, classes)
    run = generate_pasted_dataset(
        images, objects, pcfg, classes, loader=lambda im: load_image(root / im.file_name), workers=_workers(args, cfg)
    )
    out = Path(args.out)
    for im in run.dataset.images:
        save_image(run.rasters[im.id], out / "images" / im.file_name)
    write_coco(run.dataset, out / "pasted.json")
    names = run.dataset.class_names()
    per_class = {names[c.id]: 0 for c in classes}
    for a in run.dataset.annotations:
        per_class[names[a.category_id]] += 1
    counts = {"images": len(run.dataset.images), "objects": len(run.dataset.annotations), "per_class": per_class, "warnings": len(run.warnings)}
    return {"counts": counts, "outputs": ["pasted.json", "images/"], "seed": seed}


def cmd_consensus(args, cfg: dict) -> dict:
    images = read_coco(args.images)
    sec = _section(cfg, "consensus")
    for flag, key in ((args.confidence_min, "confidence_min"), (args.iou_min, "iou_min"), (args.min_models, "min_models")):
        if flag is not None:
            sec[key] = flag
    try:
        ccfg = ConsensusConfig(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad consensus config: {exc}") from exc
    preds = _load_predictions(_named_paths(args.pred, cfg.get("predictions"), cfg))
    ds = build_consensus(preds, images.images, images.classes, ccfg)
    out = Path(args.out)
    write_coco(ds, out / "consensus.json", include_scores=False)
    counts = {"models": len(preds), "input_predictions": sum(map(len, preds.values())), "annotations": len(ds.annotations)}
    return {"counts": counts, "outputs": ["consensus.json"], "seed": None}


def cmd_eval(args, cfg: dict) -> dict:
    gt = read_coco(args.gt)
    sec = _section(cfg, "evaluation")
    iou_thr = args.iou if args.iou is not None else float(sec.get("iou", 0.5))
    conf = args.confidence if args.confidence is not None else float(sec.get("confidence", 0.3))
    preds = _load_predictions(_named_paths(args.pred, cfg.get("predictions"), cfg))
    if not preds:
        raise ConfigError("eval needs at least one --pred NAME=PATH")
    reports, body = {}, {}
    for name, dets in preds.items():
        reports[name] = compute_map(dets, gt)
        m = match_detections(dets, gt, iou_thr, conf)
        body[name] = {
            "metrics": reports[name].to_dict(),
            "matches": {"tp": len(m.true_positives), "fp": len(m.false_positives), "fn": len(m.false_negatives)},
            "confusion": {
                norm: confusion_matrix(dets, gt, iou_thr, conf, norm).to_dict() for norm in ("none", "row", "column")
            },
        }
    out = Path(args.out)
    _write_json(out / "metrics.json", {"iou": iou_thr, "confidence": conf, "models": body})
    (out / "metrics.txt").write_text(format_metric_table(reports))
    counts = {name: b["matches"] for name, b in body.items()}
    return {"counts": counts, "outputs": ["metrics.json", "metrics.txt"], "seed": None}


def cmd_convert(args, cfg: dict) -> dict:
    ds = read_coco(args.input)
    if args.labels:
        # YOLO import: image list and classes come from --input
        label_dir = Path(args.labels)
        texts = {p.name: p.read_text() for p in sorted(label_dir.glob("*.txt"))}
        ds = parse_yolo(texts, ds.images, ds.classes)
    files = convert_labels(ds, args.to)
    write_label_files(files, Path(args.out) / args.to)
    counts = {"files": len(files), "annotations": len(ds.annotations)}
    return {"counts": counts, "outputs": [f"{args.to}/"], "seed": None}


def cmd_split(args, cfg: dict) -> dict:
    seed = _seed(args, cfg, True)
    ds = read_coco(args.input)
    fraction = args.fraction if args.fraction is not None else float(_section(cfg, "split").get("fraction", 0.9))
    train, evaluation = split_dataset(ds, fraction, seed)
    out = Path(args.out)
    write_coco(train, out / "train.json")
    write_coco(evaluation, out / "eval.json")
    counts = {
        "train_images": len(train.images),
        "eval_images": len(evaluation.images),
        "train_annotations": len(train.annotations),
        "eval_annotations": len(evaluation.annotations),
    }
    return {"counts": counts, "outputs": ["train.json", "eval.json"], "seed": seed}


COMMANDS = {
    "label": cmd_label,
    "fpfn": cmd_fpfn,
    "mosaic": cmd_mosaic,
    "paste": cmd_paste,
    "consensus": cmd_consensus,
    "eval": cmd_eval,
    "convert": cmd_convert,
    "split": cmd_split,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run configuration")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--workers", type=int, help="parallel workers (output does not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="odpkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"odpkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("label", parents=[common], help="run detectors and the filter chain into COCO proposals")
    p.add_argument("--images", required=True, help="COCO file listing the images")
    p.add_argument("--image-root")
    p.add_argument("--pred", action="append", metavar="NAME=PATH", help="extra file-backed detector")
    p.add_argument("--format", choices=("coco", "yolo"), default="coco", help="also export YOLO labels")

    p = sub.add_parser("fpfn", parents=[common], help="extract and pool false positives / negatives")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", action="append", metavar="NAME=PATH")
    p.add_argument("--image-root", help="write FP/FN crops from these images")
    p.add_argument("--confidence", type=float)
    p.add_argument("--merge-iou", type=float)

    p = sub.add_parser("mosaic", parents=[common], help="assemble FP crops into per-class mosaics")
    p.add_argument("--fp", required=True, help="COCO results file of false positives")
    p.add_argument("--images", required=True, help="COCO file with the source images and classes")
    p.add_argument("--image-root")
    p.add_argument("--objects", help="object library for opposite-class insertion")
    p.add_argument("--variant", choices=("square", "double_width", "double_height"))

    p = sub.add_parser("paste", parents=[common], help="paste scaled objects onto backgrounds")
    p.add_argument("--backgrounds", required=True, help="COCO file of object-free background images")
    p.add_argument("--objects", required=True, help="object library directory")
    p.add_argument("--image-root")
    p.add_argument("--margin", type=int)
    p.add_argument("--exif", action="store_true", help="read flight metadata from image EXIF when missing")
    p.add_argument("--camera-table", help="JSON camera model -> sensor width (mm)")

    p = sub.add_parser("consensus", parents=[common], help="build a consensus dataset from several models")
    p.add_argument("--images", required=True)
    p.add_argument("--pred", action="append", metavar="NAME=PATH")
    p.add_argument("--confidence-min", type=float)
    p.add_argument("--iou-min", type=float)
    p.add_argument("--min-models", type=int)

    p = sub.add_parser("eval", parents=[common], help="COCO metrics and confusion matrices")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", action="append", metavar="NAME=PATH")
    p.add_argument("--iou", type=float)
    p.add_argument("--confidence", type=float)

    p = sub.add_parser("convert", parents=[common], help="convert between COCO and YOLO labels")
    p.add_argument("--input", required=True, help="COCO file (image list and classes when --labels is given)")
    p.add_argument("--labels", help="directory of YOLO .txt files to import")
    p.add_argument("--to", choices=("coco", "yolo"), required=True)

    p = sub.add_parser("split", parents=[common], help="image-level train/eval split")
    p.add_argument("--input", required=True)
    p.add_argument("--fraction", type=float)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg)
        effective = {"config": cfg, "args": {k: v for k, v in vars(args).items() if k not in _UNHASHED}}
        write_manifest(out, args.command, effective, result["seed"], result["counts"], result["outputs"])
    except ConfigError as exc:
        print(f"odpkit {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"odpkit {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        print(f"odpkit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PROCESSING
    print(json.dumps(result["counts"], sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
