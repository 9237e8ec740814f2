"""Mask average precision over IoU thresholds 0.50:0.05:0.95.

Protocol: per image and category, detections are matched greedily in
descending score order to the highest-IoU unmatched ground truth at or
above the threshold; precision-recall is accumulated over the score-sorted
dataset and averaged at 101 interpolated recall points. At most 100
detections per image are scored. Multi-class mode averages per-category AP
over categories with at least one ground truth; class-agnostic mode merges
all labels before matching.

Score ties are broken by image id, then by detection input order within an
image, so results never depend on the order images are fed in.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import BinaryMask, MaskShapeError, mask_iou

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
MAX_DETECTIONS_PER_IMAGE = 100

MODE_MULTICLASS = "multiclass"
MODE_AGNOSTIC = "agnostic"


class EvaluationError(ValueError):
    """Evaluation inputs are inconsistent."""


class UndefinedMetricError(EvaluationError):
    """AP requested over a dataset with no ground truth."""


@dataclass(frozen=True)
class Detection:
    """One predicted instance."""

    image_id: int
    category_id: int
    score: float
    mask: BinaryMask


@dataclass(frozen=True)
class GroundTruthInstance:
    """One reference instance, mask already rasterized to image size."""

    id: int
    image_id: int
    category_id: int
    mask: BinaryMask


@dataclass(frozen=True)
class MatchResult:
    """Greedy matching outcome for one image at one IoU threshold.

    Entries are aligned with `order`, the detection indices in processing
    (descending-score) order. Unmatched detections carry gt id None.
    """

    order: tuple[int, ...]
    is_tp: tuple[bool, ...]
    matched_gt: tuple[int | None, ...]
    iou: tuple[float, ...]
    n_gt: int


def _check_shapes(dets, gts):
    shapes = {d.mask.array.shape for d in dets} | {g.mask.array.shape for g in gts}
    if len(shapes) > 1:
        raise MaskShapeError(f"masks disagree on image dimensions: {sorted(shapes)}")


def _score_order(dets) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_detections(dets, gts, iou_thr: float) -> MatchResult:
    """Greedy one-to-one matching within a single image.

    A detection claims the highest-IoU unmatched ground truth of its own
    category with IoU >= iou_thr; ties on IoU go to the earliest ground
    truth in input order.
    """
    _check_shapes(dets, gts)
    order = _score_order(dets)
    taken = [False] * len(gts)
    is_tp, matched, ious = [], [], []
    for det_idx in order:
        det = dets[det_idx]
        best_iou, best_gt = 0.0, None
        for g_idx, gt in enumerate(gts):
            if taken[g_idx] or gt.category_id != det.category_id:
                continue
            iou = mask_iou(det.mask, gt.mask)
            if iou >= iou_thr and iou > best_iou:
                best_iou, best_gt = iou, g_idx
        if best_gt is None:
            is_tp.append(False)
            matched.append(None)
            ious.append(0.0)
        else:
            taken[best_gt] = True
            is_tp.append(True)
            matched.append(gts[best_gt].id)
            ious.append(best_iou)
    return MatchResult(
        order=tuple(order),
        is_tp=tuple(is_tp),
        matched_gt=tuple(matched),
        iou=tuple(ious),
        n_gt=len(gts),
    )


def _interpolated_ap(scored_flags, n_gt: int) -> float:
    """101-point interpolated AP from (sort_key, is_tp) pairs."""
    if n_gt == 0:
        raise UndefinedMetricError("no ground truth instances for this metric")
    if not scored_flags:
        return 0.0
    flags = [tp for _, tp in sorted(scored_flags, key=lambda e: e[0])]
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum([not f for f in flags])
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.arange(101) / 100.0
    idx = np.searchsorted(recall, points, side="left")
    valid = idx < len(recall)
    return float(np.where(valid, envelope[np.minimum(idx, len(recall) - 1)], 0.0).mean())


def _group_by_image(items):
    grouped: dict[int, list] = {}
    for item in items:
        grouped.setdefault(item.image_id, []).append(item)
    return grouped


def _cap_detections(dets):
    if len(dets) <= MAX_DETECTIONS_PER_IMAGE:
        return dets
    keep = _score_order(dets)[:MAX_DETECTIONS_PER_IMAGE]
    return [dets[i] for i in sorted(keep)]


def ap_at_threshold(dets, gts, iou_thr: float) -> float:
    """Dataset-level AP at one threshold, all instances sharing one label.

    `dets` and `gts` are Detection / GroundTruthInstance lists spanning any
    number of images; matching runs per image, accumulation is global.
    """
    det_images = _group_by_image(dets)
    gt_images = _group_by_image(gts)
    scored_flags = []
    for image_id in sorted(det_images.keys() | gt_images.keys()):
        image_dets = _cap_detections(det_images.get(image_id, []))
        result = match_detections(image_dets, gt_images.get(image_id, []), iou_thr)
        for pos, det_idx in enumerate(result.order):
            sort_key = (-image_dets[det_idx].score, image_id, det_idx)
            scored_flags.append((sort_key, result.is_tp[pos]))
    return _interpolated_ap(scored_flags, len(gts))


@dataclass(frozen=True)
class EvalResult:
    mode: str
    map: float
    ap50: float
    ap75: float
    per_category: dict[int, float]

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "mAP": self.map,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "per_category": {str(k): v for k, v in sorted(self.per_category.items())},
        }


def summarize(dets, gts, mode: str = MODE_MULTICLASS) -> EvalResult:
    """mAP / AP50 / AP75 plus a per-category table.

    Multi-class: APs are computed per category (categories with no ground
    truth are excluded) and averaged. Class-agnostic: labels are merged
    before matching. Detections referencing images absent from the ground
    truth image set are rejected.
    """
    if mode not in (MODE_MULTICLASS, MODE_AGNOSTIC):
        raise EvaluationError(f"unknown mode {mode!r}")
    if not gts:
        raise UndefinedMetricError("cannot evaluate without ground truth")
    gt_image_ids = {g.image_id for g in gts}
    stray = {d.image_id for d in dets} - gt_image_ids
    if stray:
        raise EvaluationError(f"detections reference unknown images {sorted(stray)[:5]}")

    if mode == MODE_AGNOSTIC:
        dets = [replace(d, category_id=0) for d in dets]
        gts = [replace(g, category_id=0) for g in gts]

    # the per-image cap applies across categories, before any label split
    dets = [d for group in _group_by_image(dets).values() for d in _cap_detections(group)]

    categories = sorted({g.category_id for g in gts})
    ap_table = np.zeros((len(categories), len(IOU_THRESHOLDS)))
    for c_idx, category in enumerate(categories):
        cat_dets = [d for d in dets if d.category_id == category]
        cat_gts = [g for g in gts if g.category_id == category]
        for t_idx, thr in enumerate(IOU_THRESHOLDS):
            ap_table[c_idx, t_idx] = ap_at_threshold(cat_dets, cat_gts, thr)

    per_threshold = ap_table.mean(axis=0)
    per_category = {c: float(ap_table[i].mean()) for i, c in enumerate(categories)}
    return EvalResult(
        mode=mode,
        map=float(per_threshold.mean()),
        ap50=float(per_threshold[IOU_THRESHOLDS.index(0.50)]),
        ap75=float(per_threshold[IOU_THRESHOLDS.index(0.75)]),
        per_category=per_category,
    )
