"""Prediction heads: per-anchor conv heads over the pyramid and the toy
mask decoder.

The conv heads emit objectness, box deltas, and class logits for every
anchor cell on every pyramid level. The mask decoder runs two-way
cross-attention between prompt tokens and the image embedding, upscales
the attended embedding with transposed convolutions, and produces one mask
logit map per proposal as an inner product between a hypernetwork vector
and the upscaled embedding.
"""

from __future__ import annotations

import torch
from torch import nn


class ConvHeads(nn.Module):
    """Shared 3x3 stem plus 1x1 heads, applied to each pyramid level."""

    def __init__(self, width: int, anchors_per_cell: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.anchors_per_cell = anchors_per_cell
        self.stem = nn.Sequential(nn.Conv2d(width, width, 3, padding=1), nn.ReLU())
        self.objectness = nn.Conv2d(width, anchors_per_cell, 1)
        self.deltas = nn.Conv2d(width, anchors_per_cell * 4, 1)
        # classes plus one background slot
        self.classes = nn.Conv2d(width, anchors_per_cell * (num_classes + 1), 1)

    def forward(self, levels):
        """Flattened per-anchor outputs across levels, anchor order matching
        pyramid_anchors: (B, M), (B, M, 4), (B, M, C + 1)."""
        obj_parts, delta_parts, cls_parts = [], [], []
        for fmap in levels:
            b = fmap.shape[0]
            stem = self.stem(fmap)
            a = self.anchors_per_cell
            obj = self.objectness(stem)  # (B, A, H, W)
            obj_parts.append(obj.permute(0, 2, 3, 1).reshape(b, -1))
            deltas = self.deltas(stem).reshape(b, a, 4, *fmap.shape[-2:])
            delta_parts.append(deltas.permute(0, 3, 4, 1, 2).reshape(b, -1, 4))
            cls = self.classes(stem).reshape(b, a, self.num_classes + 1, *fmap.shape[-2:])
            cls_parts.append(cls.permute(0, 3, 4, 1, 2).reshape(b, -1, self.num_classes + 1))
        return (
            torch.cat(obj_parts, dim=1),
            torch.cat(delta_parts, dim=1),
            torch.cat(cls_parts, dim=1),
        )


class TwoWayBlock(nn.Module):
    """Tokens attend to the image, the image attends back, tokens mix."""

    def __init__(self, dim: int, heads: int = 2):
        super().__init__()
        self.token_to_image = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_tokens = nn.LayerNorm(dim)
        self.image_to_token = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_image = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))
        self.norm_mlp = nn.LayerNorm(dim)

    def forward(self, tokens, image_seq):
        attended, _ = self.token_to_image(tokens, image_seq, image_seq, need_weights=False)
        tokens = self.norm_tokens(tokens + attended)
        back, _ = self.image_to_token(image_seq, tokens, tokens, need_weights=False)
        image_seq = self.norm_image(image_seq + back)
        tokens = self.norm_mlp(tokens + self.mlp(tokens))
        return tokens, image_seq


class MaskDecoder(nn.Module):
    """Per-proposal mask logits from prompt tokens and the image embedding.

    Output masks live on a fixed mask_size grid covering the whole image;
    callers upsample to image resolution and threshold.
    """

    def __init__(self, dim: int = 64, grid: int = 8, mask_size: int = 32, heads: int = 2):
        super().__init__()
        if mask_size % grid != 0 or (mask_size // grid) not in (1, 2, 4):
            raise ValueError("mask_size must be grid * 1, 2, or 4")
        self.dim = dim
        self.grid = grid
        self.mask_size = mask_size
        self.pos_embed = nn.Parameter(torch.zeros(1, grid * grid, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.block = TwoWayBlock(dim, heads)
        mid = max(dim // 2, 8)
        out_ch = max(dim // 4, 8)
        doublings = {1: 0, 2: 1, 4: 2}[mask_size // grid]
        ups = []
        ch = dim
        for step in range(doublings):
            nxt = mid if step == 0 else out_ch
            ups += [nn.ConvTranspose2d(ch, nxt, 2, stride=2), nn.GELU()]
            ch = nxt
        self.upscale = nn.Sequential(*ups) if ups else nn.Identity()
        self.hyper = nn.Linear(dim, ch)

    def forward(self, image_embed: torch.Tensor, tokens: torch.Tensor, batch_idx: torch.Tensor):
        """image_embed (B, dim, grid, grid); tokens (P, k, dim); batch_idx (P,).

        Returns (P, mask_size, mask_size) logits.
        """
        if tokens.shape[0] == 0:
            size = self.mask_size
            return torch.zeros(0, size, size, device=image_embed.device, dtype=image_embed.dtype)
        per_proposal = image_embed[batch_idx]  # (P, dim, g, g)
        seq = per_proposal.flatten(2).transpose(1, 2) + self.pos_embed
        tokens, seq = self.block(tokens, seq)
        spatial = seq.transpose(1, 2).reshape(
            tokens.shape[0], self.dim, self.grid, self.grid
        )
        upscaled = self.upscale(spatial)  # (P, ch, mask, mask)
        weights = self.hyper(tokens.mean(dim=1))  # (P, ch)
        return torch.einsum("pc,pchw->phw", weights, upscaled)
