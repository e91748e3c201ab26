"""Dual-branch feature extraction: a compound-scaled conv branch and a ViT branch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv2d, LayerNorm, Linear, Module, param
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingConfig:
    phi: float = 0.0
    alpha: float = 1.2
    beta: float = 1.1
    gamma: float = 1.15

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 1:
            raise ConfigError("alpha, beta and gamma must all be >= 1")
        product = self.alpha * self.beta ** 2 * self.gamma ** 2
        if not 1.8 <= product <= 2.2:
            raise ConfigError(f"alpha*beta^2*gamma^2 = {product:.4g}, must be within [1.8, 2.2]")
        if self.phi < 0:
            raise ConfigError("phi must be >= 0")


def compound_scale(cfg: ScalingConfig) -> tuple[float, float, float]:
    """(depth, width, resolution) multipliers alpha^phi, beta^phi, gamma^phi."""
    cfg.validate()
    return cfg.alpha ** cfg.phi, cfg.beta ** cfg.phi, cfg.gamma ** cfg.phi


class ConvBlock(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1):
        self.conv = Conv2d(c_in, c_out, kernel, rng, stride=stride, bias=False)
        self.norm = BatchNorm(c_out)

    def __call__(self, x):
        return T.silu(self.norm(self.conv(x)))


class ConvBranch(Module):
    """5x5 stride-2 stem, four stride-2 stages, 1x1 projection to ``out_channels``.

    Total stride is 32.  Depth and width multipliers from compound scaling set
    the convs per stage and the channel counts.
    """

    def __init__(self, rng: np.random.Generator, in_channels: int = 1, stem_channels: int = 16,
                 stage_channels=(16, 32, 64, 96), out_channels: int = 96,
                 scaling: ScalingConfig = ScalingConfig()):
        depth, width, _ = compound_scale(scaling)
        per_stage = max(1, math.ceil(2 * depth))
        widths = [max(1, round(c * width)) for c in stage_channels]
        stem = max(1, round(stem_channels * width))
        self.stem = ConvBlock(in_channels, stem, 5, rng, stride=2)
        blocks = []
        c_prev = stem
        for c in widths:
            for i in range(per_stage):
                blocks.append(ConvBlock(c_prev, c, 3, rng, stride=2 if i == 0 else 1))
                c_prev = c
        self.blocks = blocks
        self.proj = Conv2d(c_prev, out_channels, 1, rng, padding=0)
        self.out_channels = out_channels

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"conv branch needs H and W divisible by 32, got {h}x{w}")
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return self.proj(x)


def mhsa(tokens: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int,
         return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over tokens [B, N, D]."""
    b, n, d = tokens.shape
    if d % heads:
        raise ValueError(f"feature dim {d} not divisible by {heads} heads")
    dk = d // heads

    def split(t):
        return t.reshape(b, n, heads, dk).transpose(0, 2, 1, 3)

    q, k, v = split(tokens @ wq), split(tokens @ wk), split(tokens @ wv)
    weights = T.softmax((q @ k.T) * (1.0 / math.sqrt(dk)), axis=-1)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, d) @ wo
    return (out, weights) if return_weights else out


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(dim, dim, rng, bias=False).weight
        self.wk = Linear(dim, dim, rng, bias=False).weight
        self.wv = Linear(dim, dim, rng, bias=False).weight
        self.wo = Linear(dim, dim, rng, bias=False).weight

    def __call__(self, tokens: Tensor, return_weights: bool = False):
        return mhsa(tokens, self.wq, self.wk, self.wv, self.wo, self.heads, return_weights)


class TransformerLayer(Module):
    """Pre-norm residual block: z + MHSA(LN z), then z + MLP(LN z)."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def __call__(self, z: Tensor) -> Tensor:
        z = z + self.attn(self.norm1(z))
        return z + self.fc2(T.gelu(self.fc1(self.norm2(z))))


class ViTBranch(Module):
    def __init__(self, rng: np.random.Generator, image_size: int = 64, patch_size: int = 8,
                 dim: int = 32, heads: int = 4, layers: int = 2, mlp_ratio: int = 2,
                 in_channels: int = 1):
        if image_size % patch_size:
            raise ValueError(f"image size {image_size} not divisible by patch size {patch_size}")
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.patch_size = patch_size
        self.dim = dim
        n_tokens = (image_size // patch_size) ** 2
        self.embed = Linear(patch_size * patch_size * in_channels, dim, rng, bias=False).weight
        self.pos = param(rng.normal(0.0, 0.02, size=(n_tokens + 1, dim)))
        self.cls = param(rng.normal(0.0, 0.02, size=(dim,)))
        self.layers = [TransformerLayer(dim, heads, mlp_ratio, rng) for _ in range(layers)]

    def patch_embed(self, x: Tensor) -> Tensor:
        return patch_embed(x, self.embed, self.pos, self.cls, self.patch_size)

    def __call__(self, x: Tensor) -> Tensor:
        z = self.patch_embed(x)
        for layer in self.layers:
            z = layer(z)
        return z[:, 0, :]


def patchify(x: Tensor, p: int) -> Tensor:
    """[B, C, H, W] -> [B, N, p*p*C], patches in row-major grid order."""
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible into {p}x{p} patches")
    gh, gw = h // p, w // p
    return x.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, p * p * c)


def patch_embed(x: Tensor, embed: Tensor, pos: Tensor, cls: Tensor, p: int) -> Tensor:
    """z0 = [cls; x_1 E; ...; x_N E] + E_pos, shape [B, N+1, D]."""
    patches = patchify(x, p) @ embed
    b = x.shape[0]
    cls_rows = T.broadcast_to(cls.reshape(1, 1, -1), (b, 1, cls.shape[-1]))
    tokens = T.concat([cls_rows, patches], axis=1)
    if tokens.shape[1] != pos.shape[0]:
        raise ValueError(f"{tokens.shape[1]} tokens but {pos.shape[0]} position embeddings")
    return tokens + pos


def fuse(f_vit: Tensor, f_eff: Tensor) -> Tensor:
    """Broadcast the ViT vector over the conv grid and concatenate channels first."""
    if f_vit.shape[0] != f_eff.shape[0]:
        raise ValueError(f"batch mismatch: {f_vit.shape[0]} vs {f_eff.shape[0]}")
    b, d = f_vit.shape
    _, _, h, w = f_eff.shape
    grid = T.broadcast_to(f_vit.reshape(b, d, 1, 1), (b, d, h, w))
    return T.concat([grid, f_eff], axis=1)
