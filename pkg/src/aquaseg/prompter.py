"""Multi-scale feature fusion and proposal-conditioned prompt embeddings.

Per captured encoder map: a channel gate, then three parallel convolutions
(3/5/7 kernels, symmetric padding) summed into one fused map; the fused map
is blended toward its per-channel spatial mean to damp scattered noise, and
each level absorbs the previous level through a 3x3 convolution. The last
fused map is expanded into a three-level pyramid (1x, 2x, 4x) by stride-2
transposed convolutions. Prompts are produced per proposal by pooling a
7x7 region from the scale-matched pyramid level and projecting it, together
with the normalized box geometry, to a fixed group of prompt tokens.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn
from torchvision.ops import roi_align

from .encoder import ChannelAdapter
from .geometry import Box

log = logging.getLogger(__name__)

FUSION_KERNELS = (3, 5, 7)


class PrompterShapeError(ValueError):
    """Feature maps disagree with the configured channel/spatial layout."""


@dataclass(frozen=True)
class PrompterConfig:
    in_channels: int = 192  # encoder feature dim
    width: int = 64  # fused channel width
    mean_blend_weight: float = 0.8
    levels: int = 3  # number of captured encoder maps fed in
    prompt_tokens: int = 4
    prompt_dim: int = 64
    pool_size: int = 7
    canonical_box_size: float = 8.0  # box side that maps to the finest level
    projection_hidden: int = 128

    def __post_init__(self):
        if not 0.0 <= self.mean_blend_weight <= 1.0:
            raise ValueError(f"mean_blend_weight {self.mean_blend_weight} outside [0, 1]")
        if self.levels < 1:
            raise ValueError("need at least one fusion level")
        if min(self.in_channels, self.width, self.prompt_tokens, self.prompt_dim) < 1:
            raise ValueError("channel/token sizes must be positive")


def blend_with_spatial_mean(fmap: torch.Tensor, weight: float) -> torch.Tensor:
    """weight * fmap + (1 - weight) * per-channel spatial mean.

    The blend never moves the per-channel mean, and a spatially constant
    map is a fixed point for every weight.
    """
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"blend weight {weight} outside [0, 1]")
    mean = fmap.mean(dim=(-2, -1), keepdim=True)
    return weight * fmap + (1.0 - weight) * mean


class MultiScaleFusion(nn.Module):
    """Channel gate followed by summed 3/5/7 convolutions, dims preserved."""

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.gate = ChannelAdapter(in_channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(in_channels, width, k, padding=k // 2) for k in FUSION_KERNELS
        )

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.ndim != 4 or fmap.shape[1] != self.convs[0].in_channels:
            raise PrompterShapeError(
                f"expected (B, {self.convs[0].in_channels}, H, W), got {tuple(fmap.shape)}"
            )
        gated = self.gate(fmap)
        out = self.convs[0](gated)
        for conv in self.convs[1:]:
            out = out + conv(gated)
        return out


class CrossLayerFusion(nn.Module):
    """Adds a 3x3-convolved copy of the previous level to the current one."""

    def __init__(self, width: int, transitions: int):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(width, width, 3, padding=1) for _ in range(transitions)
        )

    def fuse(self, current: torch.Tensor, previous: torch.Tensor | None, transition: int):
        if previous is None:
            return current
        if previous.shape != current.shape:
            raise PrompterShapeError(
                f"cross-layer shapes differ: {tuple(previous.shape)} vs {tuple(current.shape)}"
            )
        return current + self.convs[transition](previous)


@dataclass(frozen=True)
class FeaturePyramid:
    """Same-width maps at 1x, 2x, and 4x of the encoder grid."""

    levels: tuple[torch.Tensor, ...]

    def __post_init__(self):
        base = self.levels[0]
        for i, lvl in enumerate(self.levels):
            if lvl.shape[1] != base.shape[1]:
                raise PrompterShapeError("pyramid channel width must be constant")
            if lvl.shape[-2:] != (base.shape[-2] * 2**i, base.shape[-1] * 2**i):
                raise PrompterShapeError("pyramid levels must double in size")

    @property
    def width(self) -> int:
        return self.levels[0].shape[1]


class PyramidBuilder(nn.Module):
    """Two chained stride-2 transposed convolutions over the fused map."""

    def __init__(self, width: int):
        super().__init__()
        self.up_once = nn.ConvTranspose2d(width, width, kernel_size=2, stride=2)
        self.up_twice = nn.ConvTranspose2d(width, width, kernel_size=2, stride=2)

    def forward(self, fmap: torch.Tensor) -> FeaturePyramid:
        if fmap.shape[-1] < 2 or fmap.shape[-2] < 2:
            raise PrompterShapeError("pyramid input needs spatial dims >= 2")
        doubled = self.up_once(fmap)
        return FeaturePyramid(levels=(fmap, doubled, self.up_twice(doubled)))


def assign_pyramid_level(box: Box, canonical: float, n_levels: int = 3) -> int:
    """Scale rule: 0 = finest. Larger boxes pool from coarser levels."""
    side = math.sqrt(max(box.width * box.height, 1e-12))
    level = math.floor(math.log2(side / canonical)) if side > 0 else 0
    return max(0, min(n_levels - 1, level))


class PromptGenerator(nn.Module):
    """Pools a fixed-size region per proposal and projects it to tokens.

    The flattened pooled feature is concatenated with the box geometry
    (center and size, normalized by the image side) before a two-layer
    projection to `prompt_tokens` vectors of `prompt_dim`.
    """

    def __init__(self, cfg: PrompterConfig):
        super().__init__()
        self.cfg = cfg
        in_features = cfg.width * cfg.pool_size * cfg.pool_size + 4
        self.project = nn.Sequential(
            nn.Linear(in_features, cfg.projection_hidden),
            nn.GELU(),
            nn.Linear(cfg.projection_hidden, cfg.prompt_tokens * cfg.prompt_dim),
        )

    def forward(
        self, pyramid: FeaturePyramid, proposals: list[list[Box]], image_size: int
    ) -> torch.Tensor:
        """(total proposals, prompt_tokens, prompt_dim), batch-flattened.

        `proposals` holds one Box list per batch element. Out-of-bounds
        boxes are clamped to the image with a warning.
        """
        cfg = self.cfg
        device = pyramid.levels[0].device
        dtype = pyramid.levels[0].dtype
        flat: list[tuple[int, float, float, float, float, int]] = []
        for batch_idx, boxes in enumerate(proposals):
            for box in boxes:
                x0, y0, x1, y1 = box.x_min, box.y_min, box.x_max, box.y_max
                cx0 = min(max(x0, 0.0), float(image_size))
                cy0 = min(max(y0, 0.0), float(image_size))
                cx1 = min(max(x1, 0.0), float(image_size))
                cy1 = min(max(y1, 0.0), float(image_size))
                if (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1):
                    log.warning("proposal %s clamped to image bounds", (x0, y0, x1, y1))
                level = assign_pyramid_level(box, cfg.canonical_box_size, len(pyramid.levels))
                flat.append((batch_idx, cx0, cy0, cx1, cy1, level))

        n = len(flat)
        if n == 0:
            return torch.zeros(0, cfg.prompt_tokens, cfg.prompt_dim, device=device, dtype=dtype)

        pooled = torch.zeros(
            n, cfg.width, cfg.pool_size, cfg.pool_size, device=device, dtype=dtype
        )
        for level in range(len(pyramid.levels)):
            idx = [i for i, entry in enumerate(flat) if entry[5] == level]
            if not idx:
                continue
            # level 0 pools from the finest (last) pyramid map
            fmap = pyramid.levels[len(pyramid.levels) - 1 - level]
            rois = torch.tensor(
                [[flat[i][0], *flat[i][1:5]] for i in idx], device=device, dtype=dtype
            )
            feats = roi_align(
                fmap,
                rois,
                output_size=(cfg.pool_size, cfg.pool_size),
                spatial_scale=fmap.shape[-1] / image_size,
                aligned=True,
            )
            pooled[idx] = feats

        geom = torch.tensor(
            [
                [
                    (e[1] + e[3]) / 2 / image_size,
                    (e[2] + e[4]) / 2 / image_size,
                    (e[3] - e[1]) / image_size,
                    (e[4] - e[2]) / image_size,
                ]
                for e in flat
            ],
            device=device,
            dtype=dtype,
        )
        stacked = torch.cat([pooled.flatten(1), geom], dim=1)
        tokens = self.project(stacked)
        return tokens.reshape(n, cfg.prompt_tokens, cfg.prompt_dim)


class FusionPrompter(nn.Module):
    """Fusion stack over the captured encoder maps plus the prompt head.

    forward() turns the captured maps into a feature pyramid for the region
    proposer; prompts_for() converts proposals into prompt token groups.
    """

    def __init__(self, cfg: PrompterConfig):
        super().__init__()
        self.cfg = cfg
        self.fusions = nn.ModuleList(
            MultiScaleFusion(cfg.in_channels, cfg.width) for _ in range(cfg.levels)
        )
        self.cross = CrossLayerFusion(cfg.width, max(cfg.levels - 1, 1))
        self.pyramid = PyramidBuilder(cfg.width)
        self.prompts = PromptGenerator(cfg)

    def forward(self, captured: list[torch.Tensor]) -> FeaturePyramid:
        if len(captured) != len(self.fusions):
            raise PrompterShapeError(
                f"expected {len(self.fusions)} captured maps, got {len(captured)}"
            )
        carried = None
        for i, (fmap, fusion) in enumerate(zip(captured, self.fusions)):
            fused = fusion(fmap)
            balanced = blend_with_spatial_mean(fused, self.cfg.mean_blend_weight)
            carried = self.cross.fuse(balanced, carried, max(i - 1, 0))
        return self.pyramid(carried)

    def prompts_for(
        self, pyramid: FeaturePyramid, proposals: list[list[Box]], image_size: int
    ) -> torch.Tensor:
        return self.prompts(pyramid, proposals, image_size)
