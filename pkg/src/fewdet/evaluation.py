"""VOC2007-style AP50 evaluation for oriented and axis-aligned detections.

Greedy per-category matching at an IoU threshold, cumulative
precision/recall, and 11-point interpolated average precision. Difficult
ground truths neither count toward the positive total nor turn matched
detections into false positives. Score ties are broken by stable input
order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .fewshot import SplitSpec
from .geometry import AxisAlignedBox, OrientedBox, aabb_iou, rotated_iou

Box = Union[OrientedBox, AxisAlignedBox]


@dataclass(frozen=True)
class Detection:
    image_id: str
    category_id: int
    box: Box
    score: float

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be finite in [0,1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    category_id: int
    box: Box
    difficult: bool = False


@dataclass(frozen=True)
class EvalReport:
    per_category: Dict[int, float]
    base_map: float
    novel_map: float
    all_map: float
    warnings: Tuple[str, ...] = ()


def _box_iou(a: Box, b: Box, mode: str) -> float:
    if mode == "obb":
        return rotated_iou(a, b)
    if mode == "hbb":
        return aabb_iou(a, b)
    raise ValueError(f"unknown iou mode {mode!r}")


def match_detections(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
    iou_mode: str = "obb",
) -> List[Optional[bool]]:
    """Greedy VOC matching for one category.

    Detections are taken in descending score order (stable under ties);
    each is matched to the unmatched ground truth of highest IoU on its
    image if that IoU >= threshold. Returns one entry per detection in the
    *original* order: True (TP), False (FP), or None (matched a difficult
    ground truth; ignored by the PR curve).
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    gt_by_image: Dict[str, List[int]] = {}
    for gi, gt in enumerate(ground_truths):
        gt_by_image.setdefault(gt.image_id, []).append(gi)
    used = [False] * len(ground_truths)
    labels: List[Optional[bool]] = [False] * len(detections)

    for di in order:
        det = detections[di]
        best_iou, best_gi = 0.0, -1
        for gi in gt_by_image.get(det.image_id, []):
            gt = ground_truths[gi]
            if gt.category_id != det.category_id or used[gi]:
                continue
            iou = _box_iou(det.box, gt.box, iou_mode)
            if iou > best_iou:
                best_iou, best_gi = iou, gi
        if best_gi >= 0 and best_iou >= iou_threshold:
            used[best_gi] = True
            labels[di] = None if ground_truths[best_gi].difficult else True
        else:
            labels[di] = False
    return labels


def precision_recall(
    labels: Sequence[Optional[bool]],
    scores: Sequence[float],
    total_positives: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Cumulative (recall, precision) points in descending-score order.

    `total_positives` is the count of non-difficult ground truths. Entries
    labelled None (difficult matches) are skipped entirely.
    """
    if total_positives < 0:
        raise ValueError("total_positives must be >= 0")
    order = sorted(range(len(labels)), key=lambda i: -scores[i])
    tps, fps = [], []
    tp = fp = 0
    for i in order:
        if labels[i] is None:
            continue
        if labels[i]:
            tp += 1
        else:
            fp += 1
        tps.append(tp)
        fps.append(fp)
    tps = np.array(tps, dtype=np.float64)
    fps = np.array(fps, dtype=np.float64)
    if len(tps) == 0:
        return np.zeros(0), np.zeros(0)
    recall = tps / total_positives if total_positives > 0 else np.zeros_like(tps)
    precision = tps / (tps + fps)
    return recall, precision


def average_precision_voc07(recall: np.ndarray, precision: np.ndarray) -> float:
    """11-point interpolated AP: mean over r in {0, 0.1, ..., 1} of the
    max precision at recall >= r."""
    ap = 0.0
    for t in np.arange(0.0, 1.1, 0.1):
        mask = recall >= t - 1e-12
        p = float(precision[mask].max()) if mask.any() else 0.0
        ap += p / 11.0
    return ap


def category_ap(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    category_id: int,
    iou_threshold: float = 0.5,
    iou_mode: str = "obb",
) -> Tuple[float, Optional[str]]:
    """AP for one category; returns (ap, warning). AP is 0 with a warning
    when the category has neither ground truths nor detections."""
    dets = [d for d in detections if d.category_id == category_id]
    gts = [g for g in ground_truths if g.category_id == category_id]
    npos = sum(1 for g in gts if not g.difficult)
    if not dets and npos == 0:
        return 0.0, f"category {category_id}: no ground truths and no detections"
    labels = match_detections(dets, gts, iou_threshold, iou_mode)
    rec, prec = precision_recall(labels, [d.score for d in dets], npos)
    return average_precision_voc07(rec, prec), None


def map_report(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    split: SplitSpec,
    iou_threshold: float = 0.5,
    iou_mode: str = "obb",
) -> EvalReport:
    """Per-category AP plus base/novel/all mAP means."""
    known = set(split.base_categories) | set(split.novel_categories)
    for det in detections:
        if det.category_id not in known:
            raise ValueError(f"detection references unknown category {det.category_id}")

    per: Dict[int, float] = {}
    warnings: List[str] = []
    for cid in sorted(known):
        ap, warn = category_ap(detections, ground_truths, cid, iou_threshold, iou_mode)
        per[cid] = ap
        if warn:
            warnings.append(warn)

    def mean_over(cids) -> float:
        cids = sorted(cids)
        return float(np.mean([per[c] for c in cids])) if cids else 0.0

    return EvalReport(
        per_category=per,
        base_map=mean_over(split.base_categories),
        novel_map=mean_over(split.novel_categories),
        all_map=mean_over(known),
        warnings=tuple(warnings),
    )


def format_report_table(report: EvalReport, names: Optional[Dict[int, str]] = None) -> str:
    """Aligned plain-text table of per-category APs and group means."""
    rows = []
    for cid, ap in sorted(report.per_category.items()):
        label = names.get(cid, str(cid)) if names else str(cid)
        rows.append((label, ap))
    rows.append(("base mAP", report.base_map))
    rows.append(("novel mAP", report.novel_map))
    rows.append(("all mAP", report.all_map))
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{label:<{width}}  {ap:.4f}" for label, ap in rows)
