"""Cascaded channel (squeeze-excitation) then spatial attention."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module, param
from .tensor import Tensor


class SEChannel(Module):
    """Mask sigma(W2 relu(W1 GAP(F) + b1) + b2), one gate per channel."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 16):
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        b1 = np.sqrt(6.0 / (channels + hidden))
        self.w1 = param(rng.uniform(-b1, b1, size=(hidden, channels)))
        self.b1 = param(np.zeros(hidden))
        self.w2 = param(rng.uniform(-b1, b1, size=(channels, hidden)))
        self.b2 = param(np.zeros(channels))

    def __call__(self, f: Tensor):
        return se_channel(f, self.w1, self.b1, self.w2, self.b2)


def se_channel(f: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
    """Returns (gated map, channel mask [B, C])."""
    gap = f.mean(axis=(2, 3))
    hidden = T.relu(gap @ w1.T + b1)
    mask = T.sigmoid(hidden @ w2.T + b2)
    b, c = mask.shape
    return f * mask.reshape(b, c, 1, 1), mask


class SpatialAttention(Module):
    """7x7 conv over the channel-max and channel-mean planes, sigmoid gate."""

    def __init__(self, rng: np.random.Generator, kernel: int = 7):
        bound = np.sqrt(6.0 / (2 * kernel * kernel))
        self.weight = param(rng.uniform(-bound, bound, size=(1, 2, kernel, kernel)))
        self.bias = param(np.zeros(1))

    def __call__(self, f: Tensor):
        return cbam_spatial(f, self.weight, self.bias)


def cbam_spatial(f: Tensor, weight: Tensor, bias: Tensor):
    """Returns (gated map, spatial mask [B, H, W]).  Zero padding keeps H x W."""
    planes = T.concat([T.tmax(f, axis=1, keepdims=True), f.mean(axis=1, keepdims=True)], axis=1)
    pad = weight.shape[-1] // 2
    mask = T.sigmoid(T.conv2d(planes, weight, bias, stride=1, padding=pad))
    b, _, h, w = mask.shape
    return f * mask, mask.reshape(b, h, w)


class CascadedAttention(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 16):
        self.se = SEChannel(channels, rng, reduction)
        self.spatial = SpatialAttention(rng)

    def __call__(self, f: Tensor):
        return cascade(f, self.se, self.spatial)


def cascade(f_cat: Tensor, se: SEChannel, spatial: SpatialAttention):
    """Channel gating strictly before spatial gating.

    Returns (refined map, channel mask [B, C], spatial mask [B, H, W]).
    """
    f_se, m_channel = se(f_cat)
    refined, m_spatial = spatial(f_se)
    return refined, m_channel, m_spatial
