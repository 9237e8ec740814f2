"""Training loop, divergence guard, JSONL step log, and evaluation driver.

The seed fully determines batch order, anchor sampling, and therefore the
loss history. Only parameters with requires_grad stay in the optimizer;
the frozen backbone is untouched by construction.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import torch

from ..data import Scene
from ..evaluation import (
    MODE_AGNOSTIC,
    MODE_MULTICLASS,
    EvalResult,
    EvaluationError,
    summarize,
)
from .config import PipelineConfig
from .losses import LossBreakdown, compute_loss
from .model import SegmentationModel, build_loss_inputs, scene_ground_truth, scene_tensors

log = logging.getLogger(__name__)

_MODE_ALIASES = {
    "multiclass": MODE_MULTICLASS,
    "multi-class": MODE_MULTICLASS,
    "agnostic": MODE_AGNOSTIC,
    "class-agnostic": MODE_AGNOSTIC,
}


class TrainingDivergedError(RuntimeError):
    """Loss left the finite range; training state is not usable."""


def frozen_parameter_hash(model: SegmentationModel) -> str:
    """Digest of every non-trainable parameter, for freezing checks."""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        if not param.requires_grad:
            digest.update(name.encode())
            digest.update(param.detach().numpy().tobytes())
    return digest.hexdigest()


def _make_optimizer(model, cfg: PipelineConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.train.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.train.learning_rate)
    return torch.optim.AdamW(
        params, lr=cfg.train.learning_rate, weight_decay=cfg.train.weight_decay
    )


def train(
    model: SegmentationModel,
    scenes: list[Scene],
    cfg: PipelineConfig,
    log_path=None,
) -> list[LossBreakdown]:
    """Optimize in place; returns the per-step loss history."""
    if not scenes:
        raise ValueError("cannot train on an empty dataset")
    torch.manual_seed(cfg.train.seed)
    order_gen = torch.Generator().manual_seed(cfg.train.seed)
    sample_gen = torch.Generator().manual_seed(cfg.train.seed + 1)
    optimizer = _make_optimizer(model, cfg)
    history: list[LossBreakdown] = []
    log_file = Path(log_path).open("w") if log_path else None

    try:
        model.train()
        step = 0
        for epoch in range(cfg.train.epochs):
            order = torch.randperm(len(scenes), generator=order_gen).tolist()
            for start in range(0, len(order), cfg.train.batch_size):
                batch = [scenes[i] for i in order[start : start + cfg.train.batch_size]]
                images = scene_tensors(batch)
                pyramid, embed, obj, deltas, cls = model.forward_features(images)
                inputs = build_loss_inputs(
                    model, pyramid, embed, obj, deltas, cls, batch, sample_gen
                )
                breakdown = compute_loss(inputs)
                if not breakdown.finite():
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step}: {breakdown.to_json()}"
                    )
                optimizer.zero_grad()
                breakdown.total_tensor.backward()
                optimizer.step()
                history.append(breakdown)
                if log_file:
                    record = {"step": step, "epoch": epoch, **breakdown.to_json()}
                    log_file.write(json.dumps(record) + "\n")
                step += 1
    finally:
        if log_file:
            log_file.close()
    return history


def evaluate(model: SegmentationModel, scenes: list[Scene], mode: str) -> EvalResult:
    """Run inference over the scenes and score against their annotations."""
    try:
        canonical = _MODE_ALIASES[mode]
    except KeyError:
        raise EvaluationError(
            f"unknown mode {mode!r}, expected one of {sorted(_MODE_ALIASES)}"
        ) from None
    detections = []
    ground_truth = []
    for scene in scenes:
        images = scene_tensors([scene])
        detections.extend(model.predict(images, image_ids=[scene.record.id])[0])
        ground_truth.extend(scene_ground_truth(scene))
    return summarize(detections, ground_truth, canonical)
