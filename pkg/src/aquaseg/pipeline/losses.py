"""Composite training loss.

total = mean over all sampled anchors of the proposal (objectness) term,
plus the salient-anchor average of (classification + box regression +
mask) terms. The second term is gated by the per-anchor saliency
indicator and divides by the indicator sum; with no salient anchors it is
defined as zero.

Per-anchor terms: binary cross-entropy on objectness logits; cross-entropy
over categories plus a background slot; smooth L1 (transition 1.0) summed
over the four box-offset coordinates; binary cross-entropy averaged over
mask pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class AlignmentError(ValueError):
    """Prediction and target tensors disagree on the anchor count."""


@dataclass(frozen=True)
class LossInputs:
    """Per-anchor predictions and targets, aligned on the first axis.

    Rows where indicator is False contribute only the objectness term;
    their class/box/mask entries are ignored.
    """

    rpn_logits: torch.Tensor  # (N,)
    rpn_labels: torch.Tensor  # (N,) floats in {0, 1}
    indicator: torch.Tensor  # (N,) bool, True = salient anchor
    cls_logits: torch.Tensor  # (N, num_classes + 1)
    cls_labels: torch.Tensor  # (N,) int64
    reg_pred: torch.Tensor  # (N, 4)
    reg_target: torch.Tensor  # (N, 4)
    mask_logits: torch.Tensor  # (N, S, S)
    mask_targets: torch.Tensor  # (N, S, S) floats in [0, 1]

    def __post_init__(self):
        n = self.rpn_logits.shape[0]
        same = (
            self.rpn_labels.shape[0] == n
            and self.indicator.shape[0] == n
            and self.cls_logits.shape[0] == n
            and self.cls_labels.shape[0] == n
            and self.reg_pred.shape == (n, 4)
            and self.reg_target.shape == (n, 4)
            and self.mask_logits.shape[0] == n
            and self.mask_targets.shape == self.mask_logits.shape
        )
        if not same:
            raise AlignmentError("loss inputs disagree on the anchor count")
        if n == 0:
            raise AlignmentError("need at least one anchor")


@dataclass(frozen=True)
class LossBreakdown:
    rpn: float
    cls: float
    reg: float
    seg: float
    total_tensor: torch.Tensor

    @property
    def total(self) -> float:
        return float(self.total_tensor.detach())

    def finite(self) -> bool:
        return bool(torch.isfinite(self.total_tensor).all())

    def to_json(self) -> dict:
        return {
            "rpn": self.rpn,
            "cls": self.cls,
            "reg": self.reg,
            "seg": self.seg,
            "total": self.total,
        }


def compute_loss(inputs: LossInputs) -> LossBreakdown:
    """Evaluate the composite loss; the graph lives in total_tensor."""
    rpn_per_anchor = F.binary_cross_entropy_with_logits(
        inputs.rpn_logits, inputs.rpn_labels, reduction="none"
    )
    rpn_term = rpn_per_anchor.mean()

    positives = inputs.indicator
    n_pos = int(positives.sum())
    if n_pos == 0:
        zero = inputs.rpn_logits.new_zeros(())
        return LossBreakdown(
            rpn=float(rpn_term.detach()),
            cls=0.0,
            reg=0.0,
            seg=0.0,
            total_tensor=rpn_term + zero,
        )

    cls_per_anchor = F.cross_entropy(
        inputs.cls_logits[positives], inputs.cls_labels[positives], reduction="none"
    )
    reg_per_anchor = F.smooth_l1_loss(
        inputs.reg_pred[positives], inputs.reg_target[positives], reduction="none", beta=1.0
    ).sum(dim=1)
    seg_per_anchor = F.binary_cross_entropy_with_logits(
        inputs.mask_logits[positives], inputs.mask_targets[positives], reduction="none"
    ).mean(dim=(-2, -1))

    instance_term = (cls_per_anchor + reg_per_anchor + seg_per_anchor).sum() / n_pos
    total = rpn_term + instance_term
    return LossBreakdown(
        rpn=float(rpn_term.detach()),
        cls=float(cls_per_anchor.detach().sum() / n_pos),
        reg=float(reg_per_anchor.detach().sum() / n_pos),
        seg=float(seg_per_anchor.detach().sum() / n_pos),
        total_tensor=total,
    )
