"""Full CSASN composition: conv + ViT -> fuse -> cascaded attention -> head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .attention import CascadedAttention
from .backbone import ConvBranch, ScalingConfig, ViTBranch, fuse
from .head import ResidualHead, pool_refined
from .nn import Module
from .tensor import Tensor

VARIANTS = ("full", "no_attention", "no_conv", "no_vit")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    in_channels: int = 1
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 96)
    conv_out: int = 96
    scaling: ScalingConfig = field(default_factory=ScalingConfig)
    patch_size: int = 8
    vit_dim: int = 32
    vit_heads: int = 4
    vit_layers: int = 2
    vit_mlp_ratio: int = 2
    se_reduction: int = 16
    head_heads: int = 4
    head_hidden: tuple = (256, 128)
    dropout: float = 0.5
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def feature_dim(self) -> int:
        if self.variant == "no_conv":
            return self.vit_dim
        if self.variant == "no_vit":
            return self.conv_out
        return self.vit_dim + self.conv_out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("scaling"), dict):
            d["scaling"] = ScalingConfig(**d["scaling"])
        for key in ("stage_channels", "head_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class ModelOutput(NamedTuple):
    probs: list            # three Tensors [B, 2]
    features: Tensor       # pooled refined features [B, D]
    channel_mask: Optional[Tensor]
    spatial_mask: Optional[Tensor]


class CSASN(Module):
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        self.conv = None
        self.vit = None
        if cfg.variant != "no_conv":
            self.conv = ConvBranch(rng, cfg.in_channels, cfg.stem_channels, cfg.stage_channels,
                                   cfg.conv_out, cfg.scaling)
        if cfg.variant != "no_vit":
            self.vit = ViTBranch(rng, cfg.image_size, cfg.patch_size, cfg.vit_dim, cfg.vit_heads,
                                 cfg.vit_layers, cfg.vit_mlp_ratio, cfg.in_channels)
        self.attention = None
        if cfg.variant != "no_attention":
            self.attention = CascadedAttention(cfg.feature_dim, rng, cfg.se_reduction)
        self.head = ResidualHead(cfg.feature_dim, rng, cfg.head_heads, cfg.head_hidden, cfg.dropout)

    def fused_map(self, x: Tensor) -> Tensor:
        b, _, h, w = x.shape
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} must be divisible by 32")
        if self.config.variant == "no_vit":
            return self.conv(x)
        f_vit = self.vit(x)
        if self.config.variant == "no_conv":
            return T.broadcast_to(f_vit.reshape(b, -1, 1, 1), (b, f_vit.shape[1], h // 32, w // 32))
        return fuse(f_vit, self.conv(x))

    def encode(self, x):
        """Backbone, fusion, attention and pooling: (features [B, D], masks...)."""
        x = as_image_batch(x)
        f_cat = self.fused_map(x)
        if self.attention is None:
            return pool_refined(f_cat), None, None
        refined, m_channel, m_spatial = self.attention(f_cat)
        return pool_refined(refined), m_channel, m_spatial

    def __call__(self, x, rng: Optional[np.random.Generator] = None) -> ModelOutput:
        features, m_channel, m_spatial = self.encode(x)
        return ModelOutput(self.head(features, rng), features, m_channel, m_spatial)


def as_image_batch(x) -> Tensor:
    """Accept [B, H, W] or [B, C, H, W] arrays/tensors; return [B, C, H, W]."""
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim == 3:
        t = t.reshape(t.shape[0], 1, *t.shape[1:])
    if t.ndim != 4:
        raise ValueError(f"expected an image batch of rank 3 or 4, got shape {t.shape}")
    return t


def model_forward(model: CSASN, x, training: bool = False, rng: Optional[np.random.Generator] = None) -> list:
    """Three per-task probability tensors [B, 2]."""
    model.train(training)
    return model(x, rng).probs
