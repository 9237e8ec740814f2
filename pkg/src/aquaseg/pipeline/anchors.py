"""Anchor grids over the feature pyramid, ground-truth matching, sampling.

Matching follows the two-threshold rule: IoU >= 0.7 is positive, <= 0.3 is
negative, anything between is ignored. Every ground truth additionally
claims its single best-IoU anchor so no instance goes unsupervised. Loss
anchors are a fixed-size sample with positives capped at half.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

POSITIVE = 1
NEGATIVE = 0
IGNORED = -1


@dataclass(frozen=True)
class AnchorLayout:
    """Square anchor side length per pyramid level, finest level last."""

    sides: tuple[tuple[float, ...], ...] = ((26.0,), (18.0,), (12.0,))

    def per_cell(self, level: int) -> int:
        return len(self.sides[level])


def anchor_grid(level_shape: tuple[int, int], stride: float, sides) -> torch.Tensor:
    """(H * W * A, 4) anchor boxes (x0, y0, x1, y1), centers on cell centers."""
    h, w = level_shape
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) * stride
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    boxes = []
    for side in sides:
        half = side / 2.0
        boxes.append(
            torch.stack([cx - half, cy - half, cx + half, cy + half], dim=-1).reshape(-1, 4)
        )
    # interleave per cell: cell0 anchors..., cell1 anchors...
    stacked = torch.stack(boxes, dim=1)  # (HW, A, 4)
    return stacked.reshape(-1, 4)


def pyramid_anchors(level_shapes, image_size: int, layout: AnchorLayout) -> torch.Tensor:
    """Concatenated anchors for all levels, coarsest first."""
    all_boxes = []
    for level, shape in enumerate(level_shapes):
        stride = image_size / shape[0]
        all_boxes.append(anchor_grid(shape, stride, layout.sides[level]))
    return torch.cat(all_boxes, dim=0)


def box_iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(len(a), len(b)) IoU for (x0, y0, x1, y1) boxes."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def match_anchors(
    anchors: torch.Tensor,
    gt_boxes: torch.Tensor,
    positive_iou: float = 0.7,
    negative_iou: float = 0.3,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-anchor label in {1, 0, -1} and matched gt index (-1 if none).

    The best anchor for each ground truth is forced positive even when its
    IoU falls below the positive threshold.
    """
    n = anchors.shape[0]
    labels = torch.full((n,), NEGATIVE, dtype=torch.int64)
    matched = torch.full((n,), -1, dtype=torch.int64)
    if gt_boxes.numel() == 0:
        return labels, matched

    iou = box_iou_matrix(anchors, gt_boxes)
    best_iou, best_gt = iou.max(dim=1)
    labels[best_iou > negative_iou] = IGNORED
    labels[best_iou >= positive_iou] = POSITIVE
    matched[labels == POSITIVE] = best_gt[labels == POSITIVE]

    # fallback: each gt claims its best anchor
    force = iou.argmax(dim=0)
    labels[force] = POSITIVE
    matched[force] = torch.arange(gt_boxes.shape[0])
    return labels, matched


def sample_anchors(
    labels: torch.Tensor,
    sample_size: int,
    positive_fraction: float,
    generator: torch.Generator,
) -> torch.Tensor:
    """Indices of the anchors entering the loss, positives first.

    Up to sample_size * positive_fraction positives, the remainder filled
    with negatives; ignored anchors never appear. Selection within each
    group is a seeded permutation, so replay is deterministic.
    """
    positives = torch.nonzero(labels == POSITIVE, as_tuple=True)[0]
    negatives = torch.nonzero(labels == NEGATIVE, as_tuple=True)[0]
    max_pos = int(sample_size * positive_fraction)
    if positives.numel() > max_pos:
        perm = torch.randperm(positives.numel(), generator=generator)
        positives = positives[perm[:max_pos]]
    room = sample_size - positives.numel()
    if negatives.numel() > room:
        perm = torch.randperm(negatives.numel(), generator=generator)
        negatives = negatives[perm[:room]]
    return torch.cat([positives, negatives])


def encode_deltas(anchors: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """Box regression targets (dx, dy, dw, dh) from anchors to target boxes."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    bw = (boxes[:, 2] - boxes[:, 0]).clamp(min=1e-6)
    bh = (boxes[:, 3] - boxes[:, 1]).clamp(min=1e-6)
    bcx = boxes[:, 0] + bw / 2
    bcy = boxes[:, 1] + bh / 2
    return torch.stack(
        [(bcx - acx) / aw, (bcy - acy) / ah, torch.log(bw / aw), torch.log(bh / ah)],
        dim=1,
    )


def decode_deltas(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Inverse of encode_deltas; widths/heights capped to keep exp finite."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * torch.exp(deltas[:, 2].clamp(max=4.0))
    h = ah * torch.exp(deltas[:, 3].clamp(max=4.0))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)
