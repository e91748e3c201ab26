"""Residual multi-scale classification head with three binary task outputs."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .backbone import SelfAttention
from .nn import BatchNorm, LayerNorm, Linear, Module, param
from .tensor import Tensor

N_TASKS = 3


def pool_refined(f: Tensor) -> Tensor:
    """Global average pool [B, C, H, W] -> [B, C]."""
    return f.mean(axis=(2, 3))


class ResidualHead(Module):
    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 4, hidden=(256, 128),
                 dropout: float = 0.5):
        if dim % heads:
            raise ValueError(f"head feature dim {dim} not divisible by {heads} heads")
        self.attn = SelfAttention(dim, heads, rng)
        self.norm = LayerNorm(dim)
        self.w1 = Linear(dim, hidden[0], rng, bias=False).weight
        self.bn1 = BatchNorm(hidden[0])
        self.w2 = Linear(hidden[0], hidden[1], rng, bias=False).weight
        self.bn2 = BatchNorm(hidden[1])
        self.wc = [Linear(hidden[1], 2, rng).weight for _ in range(N_TASKS)]
        self.bc = [param(np.zeros(2)) for _ in range(N_TASKS)]
        self.dropout = dropout

    def head_mhsa(self, f: Tensor) -> Tensor:
        # the batch is the attention sequence: [B, D] -> [1, B, D]
        b, d = f.shape
        return self.attn(f.reshape(1, b, d)).reshape(b, d)

    def residual_norm(self, f: Tensor, f_attn: Tensor) -> Tensor:
        if f.shape != f_attn.shape:
            raise ValueError(f"residual shapes differ: {f.shape} vs {f_attn.shape}")
        return self.norm(f + f_attn)

    def multiscale_project(self, f: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        h1 = T.mish(self.bn1(f @ self.w1))
        h1 = T.dropout(h1, self.dropout, rng, self.training)
        h2 = T.mish(self.bn2(h1 @ self.w2))
        return T.dropout(h2, self.dropout, rng, self.training)

    def task_logits(self, h2: Tensor, t: int) -> Tensor:
        """Softmax probabilities [B, 2] for task t in {1, 2, 3}."""
        if t not in (1, 2, 3):
            raise ValueError(f"task index must be 1, 2 or 3, got {t}")
        return T.softmax(h2 @ self.wc[t - 1] + self.bc[t - 1], axis=-1)

    def __call__(self, f: Tensor, rng: Optional[np.random.Generator] = None) -> list[Tensor]:
        f_prime = self.residual_norm(f, self.head_mhsa(f))
        h2 = self.multiscale_project(f_prime, rng)
        return [self.task_logits(h2, t) for t in (1, 2, 3)]
