"""Full model: adapted encoder -> fusion pyramid -> conv heads -> prompts
-> mask decoder, plus target assembly for the composite loss.

Inference decodes per-anchor predictions, filters by score with NMS, pools
prompt tokens for the surviving boxes, and decodes one full-image mask per
detection (logits on a fixed grid, upsampled and thresholded at 0.5).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import nms

from ..data import Scene
from ..encoder import AdaptiveVitEncoder, EncoderShapeError
from ..evaluation import Detection, GroundTruthInstance
from ..geometry import BinaryMask, Box
from ..prompter import FeaturePyramid, FusionPrompter
from .anchors import (
    POSITIVE,
    AnchorLayout,
    decode_deltas,
    encode_deltas,
    match_anchors,
    pyramid_anchors,
    sample_anchors,
)
from .config import PipelineConfig
from .heads import ConvHeads, MaskDecoder
from .losses import LossInputs


class SegmentationModel(nn.Module):
    """End-to-end salient instance segmenter at toy scale."""

    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = AdaptiveVitEncoder(cfg.encoder)
        self.prompter = FusionPrompter(cfg.prompter)
        anchors_per_cell = len(cfg.rpn.anchor_sides[0])
        self.heads = ConvHeads(cfg.prompter.width, anchors_per_cell, cfg.num_classes)
        grid = cfg.encoder.image_size // cfg.encoder.patch_size
        self.embed_proj = nn.Conv2d(cfg.encoder.dim, cfg.decoder.dim, 1)
        self.decoder = MaskDecoder(
            dim=cfg.decoder.dim,
            grid=grid,
            mask_size=cfg.decoder.mask_size,
            heads=cfg.decoder.heads,
        )
        level_shapes = [(grid * 2**i, grid * 2**i) for i in range(3)]
        layout = AnchorLayout(sides=cfg.rpn.anchor_sides)
        self.register_buffer(
            "anchors", pyramid_anchors(level_shapes, cfg.encoder.image_size, layout)
        )

    @property
    def image_size(self) -> int:
        return self.cfg.encoder.image_size

    def forward_features(self, images: torch.Tensor):
        """(pyramid, decoder image embedding, objectness, deltas, class logits)."""
        if images.ndim != 4 or images.shape[-2:] != (self.image_size, self.image_size):
            raise EncoderShapeError(
                f"expected (B, 3, {self.image_size}, {self.image_size}), "
                f"got {tuple(images.shape)}"
            )
        captured, final = self.encoder(images)
        pyramid = self.prompter(captured)
        obj, deltas, cls = self.heads(pyramid.levels)
        return pyramid, self.embed_proj(final), obj, deltas, cls

    def _masks_for_boxes(self, pyramid, embed, boxes_per_image):
        """Mask logits (P, S, S) for proposals given as Box lists per image."""
        tokens = self.prompter.prompts_for(pyramid, boxes_per_image, self.image_size)
        batch_idx = torch.tensor(
            [b for b, boxes in enumerate(boxes_per_image) for _ in boxes],
            dtype=torch.int64,
            device=embed.device,
        )
        return self.decoder(embed, tokens, batch_idx)

    def predict(self, images, image_ids=None, score_threshold=None):
        """Detections per image, scores descending.

        Masks are binary at image resolution (predicted logits upsampled and
        thresholded at 0.5); scores combine objectness with the category
        probability; category ids are 1-based.
        """
        cfg = self.cfg.rpn
        threshold = cfg.score_threshold if score_threshold is None else score_threshold
        if image_ids is None:
            image_ids = list(range(images.shape[0]))
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                pyramid, embed, obj, deltas, cls = self.forward_features(images)
                results = []
                for b, image_id in enumerate(image_ids):
                    results.append(
                        self._predict_single(
                            pyramid, embed, obj[b], deltas[b], cls[b], b, image_id, threshold
                        )
                    )
        finally:
            self.train(was_training)
        return results

    def _predict_single(self, pyramid, embed, obj, deltas, cls, b, image_id, threshold):
        obj_scores = torch.sigmoid(obj)
        top = min(self.cfg.rpn.pre_nms_top_k, obj_scores.numel())
        obj_top, idx = obj_scores.topk(top)
        boxes = decode_deltas(self.anchors[idx], deltas[idx])
        boxes = boxes.clamp(min=0.0, max=float(self.image_size))
        wide = (boxes[:, 2] - boxes[:, 0] > 1e-3) & (boxes[:, 3] - boxes[:, 1] > 1e-3)
        boxes, obj_top, idx = boxes[wide], obj_top[wide], idx[wide]

        keep = nms(boxes, obj_top, self.cfg.rpn.nms_iou)[: self.cfg.rpn.max_detections]
        boxes, obj_top, idx = boxes[keep], obj_top[keep], idx[keep]

        probs = torch.softmax(cls[idx], dim=-1)
        fg = probs[:, : self.cfg.num_classes]
        cat_prob, cat_idx = fg.max(dim=-1)
        scores = obj_top * cat_prob
        good = scores >= threshold
        boxes, scores, cat_idx = boxes[good], scores[good], cat_idx[good]
        if boxes.shape[0] == 0:
            return []

        box_objs = [Box(*(float(v) for v in row)) for row in boxes]
        sliced = FeaturePyramid(levels=tuple(lvl[b : b + 1] for lvl in pyramid.levels))
        logits = self._masks_for_boxes(sliced, embed[b : b + 1], [box_objs])
        full = F.interpolate(
            logits[:, None],
            size=(self.image_size, self.image_size),
            mode="bilinear",
            align_corners=False,
        )[:, 0]
        binary = torch.sigmoid(full) > 0.5

        detections = [
            Detection(
                image_id=image_id,
                category_id=int(cat_idx[i]) + 1,
                score=float(scores[i]),
                mask=BinaryMask(binary[i].cpu().numpy()),
            )
            for i in range(boxes.shape[0])
        ]
        detections.sort(key=lambda d: -d.score)
        return detections


def scene_tensors(scenes: list[Scene]) -> torch.Tensor:
    """(B, 3, H, W) float batch in [0, 1] from scene images."""
    arrays = [torch.from_numpy(s.image).permute(2, 0, 1).float() / 255.0 for s in scenes]
    return torch.stack(arrays)


def scene_ground_truth(scene: Scene) -> list[GroundTruthInstance]:
    h, w = scene.record.height, scene.record.width
    return [
        GroundTruthInstance(
            id=ann.id, image_id=scene.record.id, category_id=ann.category_id, mask=ann.mask(h, w)
        )
        for ann in scene.annotations
    ]


def build_loss_inputs(
    model: SegmentationModel,
    pyramid,
    embed,
    obj,
    deltas,
    cls,
    scenes: list[Scene],
    generator: torch.Generator,
) -> LossInputs:
    """Match, sample, and align per-anchor predictions with targets."""
    cfg = model.cfg
    anchors = model.anchors
    mask_size = cfg.decoder.mask_size
    rows_rpn_logits, rows_rpn_labels, rows_indicator = [], [], []
    rows_cls_logits, rows_cls_labels = [], []
    rows_reg_pred, rows_reg_target = [], []
    rows_mask_targets = []
    prompt_boxes: list[list[Box]] = []
    positive_row_ids: list[int] = []
    row_count = 0

    for b, scene in enumerate(scenes):
        h, w = scene.record.height, scene.record.width
        gt_boxes = torch.tensor(
            [[a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max] for a in scene.annotations],
            dtype=torch.float32,
        ).reshape(-1, 4)
        labels, matched = match_anchors(
            anchors, gt_boxes, cfg.rpn.positive_iou, cfg.rpn.negative_iou
        )
        sample = sample_anchors(
            labels, cfg.rpn.sample_size, cfg.rpn.positive_fraction, generator
        )
        s_labels = labels[sample]
        s_matched = matched[sample]
        positive = s_labels == POSITIVE

        rows_rpn_logits.append(obj[b, sample])
        rows_rpn_labels.append(positive.float())
        rows_indicator.append(positive)
        rows_cls_logits.append(cls[b, sample])

        cls_labels = torch.full((len(sample),), cfg.num_classes, dtype=torch.int64)
        reg_target = torch.zeros(len(sample), 4)
        mask_target = torch.zeros(len(sample), mask_size, mask_size)
        image_prompts: list[Box] = []
        if positive.any():
            pos_rows = torch.nonzero(positive, as_tuple=True)[0]
            pos_anchor_idx = sample[pos_rows]
            pos_gt = s_matched[pos_rows]
            cats = torch.tensor(
                [scene.annotations[g].category_id - 1 for g in pos_gt.tolist()],
                dtype=torch.int64,
            )
            cls_labels[pos_rows] = cats
            reg_target[pos_rows] = encode_deltas(anchors[pos_anchor_idx], gt_boxes[pos_gt])
            for row, g in zip(pos_rows.tolist(), pos_gt.tolist()):
                ann = scene.annotations[g]
                gt_mask = torch.from_numpy(ann.mask(h, w).array).float()[None, None]
                small = F.interpolate(gt_mask, size=(mask_size, mask_size), mode="area")
                mask_target[row] = small[0, 0]
                a = anchors[sample[row]].clamp(min=0.0, max=float(model.image_size))
                image_prompts.append(Box(*(float(v) for v in a)))
                positive_row_ids.append(row_count + row)

        rows_cls_labels.append(cls_labels)
        rows_reg_pred.append(deltas[b, sample])
        rows_reg_target.append(reg_target)
        rows_mask_targets.append(mask_target)
        prompt_boxes.append(image_prompts)
        row_count += len(sample)

    mask_logits = torch.zeros(row_count, mask_size, mask_size)
    predicted = model._masks_for_boxes(pyramid, embed, prompt_boxes)
    if predicted.shape[0]:
        mask_logits = mask_logits.to(predicted.dtype)
        mask_logits[torch.tensor(positive_row_ids, dtype=torch.int64)] = predicted

    return LossInputs(
        rpn_logits=torch.cat(rows_rpn_logits),
        rpn_labels=torch.cat(rows_rpn_labels),
        indicator=torch.cat(rows_indicator),
        cls_logits=torch.cat(rows_cls_logits),
        cls_labels=torch.cat(rows_cls_labels),
        reg_pred=torch.cat(rows_reg_pred),
        reg_target=torch.cat(rows_reg_target),
        mask_logits=mask_logits,
        mask_targets=torch.cat(rows_mask_targets),
    )


def build_model(cfg: PipelineConfig) -> SegmentationModel:
    """Construct under a fixed seed: same config, same initial weights."""
    torch.manual_seed(cfg.seed)
    return SegmentationModel(cfg)
