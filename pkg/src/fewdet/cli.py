"""Command-line interface exposing each pipeline stage.

Exit codes: 0 success, 2 usage/schema error, 3 sampling infeasible,
4 missing resource, 5 check failure. Randomized commands require an
explicit --seed; every JSON output embeds the tool version and the fully
resolved configuration so runs are reproducible from their artifacts.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .contrastive import ContrastiveConfig
from .evaluation import Detection, GroundTruth, format_report_table, map_report
from .fewshot import (
    AnnotationError,
    DatasetIndex,
    EpisodeSpec,
    ImageInfo,
    SplitSpec,
    apply_gaussian_mask,
    mask_plan,
    parse_annotations,
    sample_k_shots,
    tile_windows,
)
from .geometry import AxisAlignedBox, OrientedBox, aabb_iou, obb_to_hbb, rotated_iou
from .membank import save_bank
from .toytrain import (
    LrSchedule,
    SyntheticConfig,
    compactness_metrics,
    encoder_forward,
    export_embeddings,
    generate_batch,
    gradcheck,
    train,
    write_loss_curve,
)

EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_MISSING = 4
EXIT_CHECK_FAILED = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _meta(config: Dict) -> Dict:
    return {"tool_version": __version__, "resolved_config": config}


def _write_json(path: Optional[str], payload: Dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _parse_box(spec: str, mode: str):
    parts = spec.split(",")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise CliError(f"malformed box {spec!r}: non-numeric component", EXIT_USAGE)
    if mode == "obb":
        if len(vals) != 5:
            raise CliError(
                f"malformed box {spec!r}: obb needs cx,cy,w,h,angle", EXIT_USAGE
            )
        try:
            return OrientedBox(*vals)
        except ValueError as exc:
            raise CliError(f"invalid box {spec!r}: {exc}", EXIT_USAGE)
    if len(vals) != 4:
        raise CliError(f"malformed box {spec!r}: hbb needs xmin,ymin,xmax,ymax", EXIT_USAGE)
    try:
        return AxisAlignedBox(*vals)
    except ValueError as exc:
        raise CliError(f"invalid box {spec!r}: {exc}", EXIT_USAGE)


# ---------------------------------------------------------------------------
# dataset loading shared by sample-shots / mask / eval


def load_dataset(root: str) -> DatasetIndex:
    """Read a DOTA-style dataset: <root>/labelTxt/*.txt plus optional
    <root>/images/*.png for raster sizes."""
    label_dir = os.path.join(root, "labelTxt")
    if not os.path.isdir(label_dir):
        raise CliError(f"missing label directory {label_dir}", EXIT_MISSING)
    categories: Dict[str, int] = {}
    images: List[ImageInfo] = []
    instances = []
    next_id = 0
    for fname in sorted(os.listdir(label_dir)):
        if not fname.endswith(".txt"):
            continue
        image_id = fname[:-4]
        with open(os.path.join(label_dir, fname)) as fh:
            text = fh.read()
        img_path = os.path.join(root, "images", image_id + ".png")
        width = height = 0
        if os.path.exists(img_path):
            from PIL import Image

            with Image.open(img_path) as im:
                width, height = im.size
        try:
            insts = parse_annotations(
                text,
                ImageInfo(image_id, width, height, img_path),
                categories,
                first_instance_id=next_id,
            )
        except AnnotationError as exc:
            raise CliError(f"{fname}: {exc}", EXIT_USAGE)
        if width == 0:
            # no raster: size from annotation extent
            xs = [c[0] for i in insts for c in i.box.corners()] or [1.0]
            ys = [c[1] for i in insts for c in i.box.corners()] or [1.0]
            width, height = int(math.ceil(max(xs))) + 1, int(math.ceil(max(ys))) + 1
        images.append(ImageInfo(image_id, width, height, img_path))
        instances.extend(insts)
        next_id += len(insts)
    names = [n for n, _ in sorted(categories.items(), key=lambda kv: kv[1])]
    return DatasetIndex(tuple(names), tuple(images), tuple(instances))


def load_split(path: str, index: DatasetIndex) -> SplitSpec:
    if not os.path.exists(path):
        raise CliError(f"missing split file {path}", EXIT_MISSING)
    with open(path) as fh:
        raw = json.load(fh)
    name_to_id = {n: i for i, n in enumerate(index.categories)}

    def ids(names) -> frozenset:
        out = set()
        for n in names:
            if isinstance(n, int):
                out.add(n)
            elif n in name_to_id:
                out.add(name_to_id[n])
            else:
                raise CliError(f"split names unknown category {n!r}", EXIT_USAGE)
        return frozenset(out)

    return SplitSpec(ids(raw.get("base", [])), ids(raw.get("novel", [])))


# ---------------------------------------------------------------------------
# subcommands


def cmd_iou(args) -> int:
    a = _parse_box(args.a, args.mode)
    b = _parse_box(args.b, args.mode)
    iou = rotated_iou(a, b) if args.mode == "obb" else aabb_iou(a, b)
    print(f"{iou:.6f}")
    return 0


def cmd_tile(args) -> int:
    windows = tile_windows(args.width, args.height, args.tile, args.stride)
    payload = _meta(
        {
            "width": args.width,
            "height": args.height,
            "tile": args.tile,
            "stride": args.stride,
        }
    )
    payload["windows"] = [{"x": x, "y": y} for x, y in windows]
    _write_json(args.output, payload)
    return 0


def cmd_sample_shots(args) -> int:
    index = load_dataset(args.dataset)
    split = load_split(args.split, index) if args.split else None
    if split is not None:
        cats = frozenset(split.base_categories | split.novel_categories)
    else:
        cats = frozenset(range(len(index.categories)))
    spec = EpisodeSpec(k=args.k, seed=args.seed, categories=cats)
    try:
        selected = sample_k_shots(index, spec, allow_short=args.allow_short)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INFEASIBLE)

    masked = []
    for image in index.images:
        insts = index.instances_on(image.image_id)
        if not insts:
            continue
        if not any(i.instance_id in selected for i in insts):
            continue
        regions = mask_plan(index, selected, image.image_id)
        masked.append(
            {
                "image": image.image_id,
                "regions": [
                    [b.cx, b.cy, b.w, b.h, b.angle] for b in regions
                ],
            }
        )
    payload = _meta(
        {
            "dataset": args.dataset,
            "k": args.k,
            "seed": args.seed,
            "split": args.split,
            "allow_short": args.allow_short,
        }
    )
    payload.update(
        {
            "seed": args.seed,
            "k": args.k,
            "categories": sorted(index.categories[c] for c in cats),
            "selected": sorted(selected),
            "masked": masked,
        }
    )
    _write_json(args.output, payload)
    return 0


def cmd_mask(args) -> int:
    from PIL import Image

    with open(args.manifest) as fh:
        manifest = json.load(fh)
    os.makedirs(args.output_dir, exist_ok=True)
    written = []
    for entry in manifest.get("masked", []):
        image_id = entry["image"]
        src = os.path.join(args.image_root, image_id + ".png")
        if not os.path.exists(src):
            raise CliError(f"missing image file {src}", EXIT_MISSING)
        regions = [OrientedBox(*r) for r in entry["regions"]]
        raster = np.asarray(Image.open(src))
        out = apply_gaussian_mask(raster, regions, sigma=args.sigma)
        dst = os.path.join(args.output_dir, image_id + ".png")
        Image.fromarray(out).save(dst)
        written.append({"image": image_id, "path": dst, "regions": len(regions)})
    payload = _meta(
        {
            "manifest": args.manifest,
            "image_root": args.image_root,
            "output_dir": args.output_dir,
            "sigma": args.sigma,
        }
    )
    payload["written"] = written
    _write_json(os.path.join(args.output_dir, "mask_manifest.json"), payload)
    return 0


def _load_detections(path: str, index: DatasetIndex, mode: str) -> List[Detection]:
    name_to_id = {n: i for i, n in enumerate(index.categories)}
    dets = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                cat = raw["category"]
                cid = name_to_id[cat] if isinstance(cat, str) else int(cat)
                vals = [float(v) for v in raw["box"]]
                box = OrientedBox(*vals) if mode == "obb" else AxisAlignedBox(*vals)
                dets.append(Detection(str(raw["image"]), cid, box, float(raw["score"])))
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                raise CliError(
                    f"{path}:{lineno}: bad detection record ({exc})", EXIT_USAGE
                )
    return dets


def cmd_eval(args) -> int:
    index = load_dataset(args.dataset)
    split = load_split(args.split, index)
    detections = _load_detections(args.detections, index, args.iou_mode)
    gts = []
    for inst in index.instances:
        box = inst.box if args.iou_mode == "obb" else obb_to_hbb(inst.box)
        gts.append(GroundTruth(inst.image_id, inst.category_id, box, inst.difficult))
    try:
        report = map_report(
            detections, gts, split, iou_threshold=args.iou_threshold, iou_mode=args.iou_mode
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE)
    names = {i: n for i, n in enumerate(index.categories)}
    payload = _meta(
        {
            "dataset": args.dataset,
            "detections": args.detections,
            "split": args.split,
            "iou_mode": args.iou_mode,
            "iou_threshold": args.iou_threshold,
        }
    )
    payload.update(
        {
            "per_class": {names[c]: ap for c, ap in report.per_category.items()},
            "base_map": report.base_map,
            "novel_map": report.novel_map,
            "all_map": report.all_map,
            "warnings": list(report.warnings),
        }
    )
    _write_json(args.output, payload)
    print(format_report_table(report, names), file=sys.stderr)
    return 0


def cmd_train_toy(args) -> int:
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"missing config file {args.config}", EXIT_MISSING)
    except json.JSONDecodeError as exc:
        raise CliError(f"invalid config {args.config}: {exc}", EXIT_USAGE)
    try:
        synth = SyntheticConfig(**raw.get("synthetic", {}))
        loss_cfg = ContrastiveConfig(**raw.get("contrastive", {}))
        sched_raw = dict(raw.get("schedule", {}))
        if "milestones" in sched_raw:
            sched_raw["milestones"] = tuple(sched_raw["milestones"])
        schedule = LrSchedule(**sched_raw)
        iterations = int(raw.get("iterations", 2000))
        use_cls_head = bool(raw.get("use_cls_head", False))
        enqueue_all = bool(raw.get("enqueue_all", True))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config {args.config}: {exc}", EXIT_USAGE)

    result = train(
        synth,
        loss_cfg,
        iterations,
        schedule=schedule,
        use_cls_head=use_cls_head,
        enqueue_all=enqueue_all,
    )
    os.makedirs(args.output_dir, exist_ok=True)
    write_loss_curve(result.history, os.path.join(args.output_dir, "loss_curve.csv"))
    save_bank(result.bank, os.path.join(args.output_dir, "bank.json"))

    # final embeddings on a held-out probe batch
    feats, labels, _ = generate_batch(synth, iterations + 1_000_000)
    z, _ = encoder_forward(result.encoder, feats)
    export_embeddings(z, labels, os.path.join(args.output_dir, "embeddings.csv"))
    intra, inter, margin, warn = compactness_metrics(z, labels)
    payload = _meta(
        {
            "config": args.config,
            "output_dir": args.output_dir,
            "synthetic": asdict(synth),
            "contrastive": asdict(loss_cfg),
            "schedule": {**asdict(schedule), "milestones": list(schedule.milestones)},
            "iterations": iterations,
            "use_cls_head": use_cls_head,
            "enqueue_all": enqueue_all,
        }
    )
    payload.update(
        {
            "final_mcl_loss": result.history[-1]["mcl"] if result.history else None,
            "intra_class_cosine": intra,
            "inter_class_cosine": inter,
            "margin": margin,
            "bank_occupancy": len(result.bank),
            "warnings": warn,
        }
    )
    _write_json(os.path.join(args.output_dir, "metrics.json"), payload)
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck(args.instances, args.seed, corrupt=args.self_test_corrupt)
    payload = _meta(
        {
            "instances": args.instances,
            "seed": args.seed,
            "self_test_corrupt": args.self_test_corrupt,
        }
    )
    payload.update(report)
    _write_json(args.output, payload)
    return 0 if report["pass"] else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewdet",
        description="Few-shot oriented detection toolkit: geometry, sampling, masking, evaluation, toy training.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("iou", help="IoU of two boxes")
    p.add_argument("--a", required=True, help="box as cx,cy,w,h,angle (obb) or xmin,ymin,xmax,ymax (hbb)")
    p.add_argument("--b", required=True)
    p.add_argument("--mode", choices=["obb", "hbb"], default="obb")
    p.set_defaults(func=cmd_iou)

    p = sub.add_parser("tile", help="sliding-window origins for an image size")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--tile", type=int, default=1024)
    p.add_argument("--stride", type=int, default=824)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("sample-shots", help="deterministic K-shot episode manifest")
    p.add_argument("--dataset", required=True, help="root with labelTxt/ (and optional images/)")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split", default=None, help="JSON {base: [...], novel: [...]}")
    p.add_argument("--allow-short", action="store_true", dest="allow_short")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_sample_shots)

    p = sub.add_parser("mask", help="blur unselected instances per an episode manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root", required=True, dest="image_root")
    p.add_argument("--output-dir", required=True, dest="output_dir")
    p.add_argument("--sigma", type=float, default=8.0)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("eval", help="VOC2007 AP50 report")
    p.add_argument("--dataset", required=True)
    p.add_argument("--detections", required=True, help="JSONL {image, category, box, score}")
    p.add_argument("--split", required=True)
    p.add_argument("--iou-mode", choices=["obb", "hbb"], default="obb", dest="iou_mode")
    p.add_argument("--iou-threshold", type=float, default=0.5, dest="iou_threshold")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-toy", help="desk-scale contrastive training run")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", required=True, dest="output_dir")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--self-test-corrupt", action="store_true", dest="self_test_corrupt")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
