"""Frozen vision-transformer backbone wrapped with trainable adapters.

The backbone is a small pre-norm ViT (no class token). Selected blocks get
two bottleneck adapters: one applied residually right after the attention
sublayer, one summed onto the MLP residual path. Both start at exact
identity (zero-initialized up projections), so a freshly built encoder is
functionally the frozen backbone.

The squeeze-style channel adapter lives here too; it rescales feature-map
channels by a gate computed from globally pooled statistics and starts as
an exact identity (zero up-weights, bias one). The gate is applied as-is,
with no squashing nonlinearity.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import torch
from torch import nn

SCHEMA_VERSION = 1

_ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU}


class EncoderShapeError(ValueError):
    """Input tensor does not match the module's expected shape."""


class CheckpointError(RuntimeError):
    """Checkpoint archive is malformed or does not match the model."""


def _make_activation(name: str) -> nn.Module:
    try:
        return _ACTIVATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown activation {name!r}, expected one of {sorted(_ACTIVATIONS)}")


class Adapter(nn.Module):
    """Bottleneck MLP whose up projection starts at zero.

    Output is up(act(down(tokens))); callers add it residually. Zero start
    means the wrapped network is untouched until training moves the weights.
    """

    def __init__(self, dim: int, bottleneck: int | None = None, activation: str = "gelu"):
        super().__init__()
        bottleneck = dim // 4 if bottleneck is None else bottleneck
        if not 0 < bottleneck < dim:
            raise ValueError(f"bottleneck {bottleneck} must be in (0, {dim})")
        self.down = nn.Linear(dim, bottleneck)
        self.act = _make_activation(activation)
        self.up = nn.Linear(bottleneck, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.down.in_features:
            raise EncoderShapeError(
                f"last axis {tokens.shape[-1]} != adapter dim {self.down.in_features}"
            )
        return self.up(self.act(self.down(tokens)))


class ChannelAdapter(nn.Module):
    """Per-channel multiplicative gate from globally pooled features.

    Gate = up_conv(act(down_conv(mean over H, W))), broadcast over space.
    Initialized so the gate is exactly one everywhere.
    """

    def __init__(self, channels: int, reduction: int = 4, activation: str = "relu"):
        super().__init__()
        if reduction < 1:
            raise ValueError(f"reduction {reduction} must be >= 1")
        reduced = max(1, channels // reduction)
        self.down = nn.Conv2d(channels, reduced, kernel_size=1)
        self.act = _make_activation(activation)
        self.up = nn.Conv2d(reduced, channels, kernel_size=1)
        nn.init.zeros_(self.up.weight)
        nn.init.ones_(self.up.bias)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.ndim != 4 or fmap.shape[1] != self.down.in_channels:
            raise EncoderShapeError(
                f"expected (B, {self.down.in_channels}, H, W), got {tuple(fmap.shape)}"
            )
        pooled = fmap.mean(dim=(2, 3), keepdim=True)
        gate = self.up(self.act(self.down(pooled)))
        return fmap * gate


@dataclass(frozen=True)
class EncoderConfig:
    """Toy-scale backbone geometry plus the adapter placement policy."""

    depth: int = 12
    dim: int = 192
    patch_size: int = 8
    heads: int = 3
    mlp_ratio: int = 4
    image_size: int = 64
    in_channels: int = 3
    adapt_start: int = 8  # 1-based index of the first adapted block
    adapt_stride: int = 2
    adapter_bottleneck: int | None = None
    adapter_activation: str = "gelu"

    def __post_init__(self):
        if self.depth < 1 or self.dim < 1 or self.patch_size < 1:
            raise ValueError("depth, dim, and patch_size must be positive")
        if self.adapt_start < 1 or self.adapt_stride < 1:
            raise ValueError("adapt_start and adapt_stride must be >= 1")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")


def plan_adapted_layers(cfg: EncoderConfig) -> tuple[int, ...]:
    """1-based block indices that receive adapters: start, start+stride, ..."""
    return tuple(range(cfg.adapt_start, cfg.depth + 1, cfg.adapt_stride))


def config_hash(cfg: EncoderConfig) -> str:
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.inner = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        out, _ = self.inner(tokens, tokens, tokens, need_weights=False)
        return out


class TransformerBlock(nn.Module):
    """Pre-norm ViT block; adapters are injected by the caller.

    The second adapter sees the post-attention features, the same input the
    MLP sublayer normalizes, and its output joins the MLP residual sum.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.dim = dim
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, tokens, adapter_attn=None, adapter_mlp=None):
        if tokens.shape[-1] != self.dim:
            raise EncoderShapeError(f"token dim {tokens.shape[-1]} != block dim {self.dim}")
        h = tokens + self.attn(self.norm_attn(tokens))
        if adapter_attn is not None:
            h = h + adapter_attn(h)
        out = h + self.mlp(self.norm_mlp(h))
        if adapter_mlp is not None:
            out = out + adapter_mlp(h)
        return out


class VitBackbone(nn.Module):
    """Patch embedding, learned positions, block stack, final norm."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(
            cfg.in_channels, cfg.dim, kernel_size=cfg.patch_size, stride=cfg.patch_size
        )
        side = cfg.image_size // cfg.patch_size
        self.pos_embed = nn.Parameter(torch.zeros(1, side * side, cfg.dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm_out = nn.LayerNorm(cfg.dim)

    def grid_side(self, images: torch.Tensor) -> int:
        h, w = images.shape[-2:]
        if h % self.cfg.patch_size or w % self.cfg.patch_size:
            raise EncoderShapeError(
                f"image {h}x{w} not divisible by patch size {self.cfg.patch_size}"
            )
        if h != w:
            raise EncoderShapeError(f"expected square images, got {h}x{w}")
        return h // self.cfg.patch_size

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        side = self.grid_side(images)
        tokens = self.patch_embed(images).flatten(2).transpose(1, 2)  # (B, N, C)
        pos = self.pos_embed
        expected = self.cfg.image_size // self.cfg.patch_size
        if side != expected:
            grid = pos.transpose(1, 2).reshape(1, self.cfg.dim, expected, expected)
            grid = nn.functional.interpolate(
                grid, size=(side, side), mode="bilinear", align_corners=False
            )
            pos = grid.flatten(2).transpose(1, 2)
        return tokens + pos

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        tokens = self.embed(images)
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm_out(tokens)


def _tokens_to_map(tokens: torch.Tensor, side: int) -> torch.Tensor:
    b, n, c = tokens.shape
    return tokens.transpose(1, 2).reshape(b, c, side, side)


class AdaptiveVitEncoder(nn.Module):
    """Frozen backbone plus adapters on the planned blocks.

    Forward returns the spatial feature map captured after every adapted
    block, in depth order, followed by the final normalized map. Backbone
    parameters are frozen at construction; only adapters train.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = VitBackbone(cfg)
        self.adapted_layers = plan_adapted_layers(cfg)
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.adapters_attn = nn.ModuleDict()
        self.adapters_mlp = nn.ModuleDict()
        for idx in self.adapted_layers:
            kwargs = dict(
                bottleneck=cfg.adapter_bottleneck, activation=cfg.adapter_activation
            )
            self.adapters_attn[str(idx)] = Adapter(cfg.dim, **kwargs)
            self.adapters_mlp[str(idx)] = Adapter(cfg.dim, **kwargs)

    def forward(self, images: torch.Tensor):
        side = self.backbone.grid_side(images)
        tokens = self.backbone.embed(images)
        captured = []
        for idx, block in enumerate(self.backbone.blocks, start=1):
            key = str(idx)
            if key in self.adapters_attn:
                tokens = block(
                    tokens,
                    adapter_attn=self.adapters_attn[key],
                    adapter_mlp=self.adapters_mlp[key],
                )
                captured.append(_tokens_to_map(tokens, side))
            else:
                tokens = block(tokens)
        final = _tokens_to_map(self.backbone.norm_out(tokens), side)
        return captured, final


def parameter_counts(module: nn.Module) -> tuple[int, int]:
    """(trainable, total) parameter element counts."""
    trainable = sum(p.numel() for p in module.parameters() if p.requires_grad)
    total = sum(p.numel() for p in module.parameters())
    return trainable, total


def trainable_state(module: nn.Module) -> dict[str, torch.Tensor]:
    return {
        name: param.detach().clone()
        for name, param in module.named_parameters()
        if param.requires_grad
    }


def save_trainable(module: nn.Module, path, cfg_hash: str, extra: dict | None = None) -> None:
    """Write the trainable parameters plus a name/shape manifest to `path`.

    The frozen backbone is not stored; `cfg_hash` pins the configuration it
    must be rebuilt from.
    """
    state = trainable_state(module)
    archive = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": cfg_hash,
        "manifest": {name: list(t.shape) for name, t in state.items()},
        "state": state,
    }
    if extra:
        archive["extra"] = extra
    torch.save(archive, path)


def load_trainable(module: nn.Module, path, cfg_hash: str | None = None) -> dict:
    """Load trainable parameters saved by save_trainable into `module`.

    Validates the schema version, the configuration hash when given, and the
    manifest against the module's current trainable parameters.
    """
    archive = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(archive, dict) or "schema_version" not in archive:
        raise CheckpointError("not a trainable-parameter archive")
    if archive["schema_version"] != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported schema version {archive['schema_version']}")
    if cfg_hash is not None and archive["config_hash"] != cfg_hash:
        raise CheckpointError(
            "checkpoint was written for a different configuration "
            f"({archive['config_hash'][:12]} != {cfg_hash[:12]})"
        )
    expected = {
        name: list(p.shape) for name, p in module.named_parameters() if p.requires_grad
    }
    manifest = archive["manifest"]
    if manifest != expected:
        missing = sorted(set(expected) - set(manifest))
        surplus = sorted(set(manifest) - set(expected))
        raise CheckpointError(
            f"manifest mismatch (missing {missing[:3]}, surplus {surplus[:3]}, "
            "or shape drift)"
        )
    with torch.no_grad():
        params = dict(module.named_parameters())
        for name, tensor in archive["state"].items():
            if list(tensor.shape) != manifest[name]:
                raise CheckpointError(f"stored tensor {name} disagrees with manifest")
            params[name].copy_(tensor)
    return archive.get("extra", {})
