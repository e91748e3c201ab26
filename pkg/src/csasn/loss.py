"""Composite training objective: focal + CE + MMD + BSS under uncertainty weighting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .head import N_TASKS
from .tensor import Tensor, gram_spectrum, make_op

N_COMPONENTS = 4
COMPONENTS = ("focal", "ce", "mmd", "bss")


@dataclass(frozen=True)
class LossConfig:
    gamma0: float = 2.0
    gamma_clip: tuple = (1.0, 5.0)
    bandwidth_factors: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    bss_fraction: float = 0.10
    weight_decay: float = 1e-4
    fixed_lambda: Optional[tuple] = None
    prob_eps: float = 1e-7

    def __post_init__(self):
        if not 0 < self.bss_fraction <= 1:
            raise ValueError(f"bss_fraction must be in (0, 1], got {self.bss_fraction}")
        if self.fixed_lambda is not None:
            if len(self.fixed_lambda) != N_COMPONENTS:
                raise ValueError("fixed_lambda needs exactly four coefficients")
            if abs(sum(self.fixed_lambda) - 1.0) > 1e-9:
                raise ValueError(f"fixed_lambda must sum to 1, got {sum(self.fixed_lambda)}")


@dataclass(frozen=True)
class TaskWeights:
    """Class weights (alpha_neg, alpha_pos) and focusing gamma for one task."""

    alpha: tuple
    gamma: float


class UncertaintyState:
    """Learnable log-variances s = log sigma^2, one row of four per task."""

    def __init__(self, n_tasks: int = N_TASKS):
        self.log_var = Tensor(np.zeros((n_tasks, N_COMPONENTS)), requires_grad=True)

    def sigma2(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_var.data, dtype=np.float64))


def task_masks(subtypes: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
    """(rows belonging to task t, binary labels for those rows).

    Task t compares Benign (code 0) against subtype code t.
    """
    subtypes = np.asarray(subtypes)
    rows = np.flatnonzero((subtypes == 0) | (subtypes == t))
    return rows, (subtypes[rows] == t).astype(int)


def adaptive_gamma(n_neg: int, n_pos: int, cfg: LossConfig = LossConfig()) -> float:
    if n_pos < 1:
        raise ValueError("adaptive_gamma needs at least one positive sample")
    ratio = max(n_neg, 1) / n_pos
    lo, hi = cfg.gamma_clip
    return float(np.clip(cfg.gamma0 + math.log10(ratio), lo, hi))


def class_balance(n_neg: int, n_pos: int) -> tuple[float, float]:
    """Inverse-frequency weights normalised so the weighted class mass is equal."""
    n = n_neg + n_pos
    return n / (2.0 * max(n_neg, 1)), n / (2.0 * max(n_pos, 1))


def task_weights(subtypes: Sequence[int], cfg: LossConfig = LossConfig()) -> list[TaskWeights]:
    out = []
    for t in range(1, N_TASKS + 1):
        _, y = task_masks(np.asarray(subtypes), t)
        n_pos = int(y.sum())
        n_neg = len(y) - n_pos
        gamma = adaptive_gamma(n_neg, n_pos, cfg) if n_pos else cfg.gamma0
        out.append(TaskWeights(class_balance(n_neg, n_pos), gamma))
    return out


def _picked(p: Tensor, y: np.ndarray, eps: float) -> Tensor:
    onehot = np.eye(p.shape[1])[np.asarray(y, dtype=int)]
    return T.clip((p * onehot).sum(axis=1), eps, 1.0 - eps)


def focal_loss(p: Tensor, y, alpha=(1.0, 1.0), gamma: float = 2.0, eps: float = 1e-7) -> Tensor:
    """-(1/N) sum alpha_y (1 - p_y)^gamma log p_y."""
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise ValueError("focal_loss on an empty batch")
    p_y = _picked(p, y, eps)
    weights = np.asarray(alpha, dtype=np.float64)[y]
    modulator = (1.0 - p_y) ** gamma if gamma != 0 else 1.0
    return -(weights * modulator * T.log(p_y)).mean()


def cross_entropy(p: Tensor, y, eps: float = 1e-7) -> Tensor:
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise ValueError("cross_entropy on an empty batch")
    return -T.log(_picked(p, y, eps)).mean()


def _pairwise_sq_dists(z: Tensor) -> Tensor:
    m, d = z.shape
    diff = z.reshape(m, 1, d) - z.reshape(1, m, d)
    return (diff * diff).sum(axis=2)


def median_sq_distance(d2: Tensor) -> Tensor:
    """Median of the off-diagonal squared distances, as a differentiable selection."""
    m = d2.shape[0]
    iu, ju = np.triu_indices(m, k=1)
    values = d2.data[iu, ju]
    order = np.argsort(values, kind="stable")
    mid = len(values) // 2
    pick = order[[mid]] if len(values) % 2 else order[[mid - 1, mid]]
    return d2[iu[pick], ju[pick]].mean()


def mmd(f: Tensor, f2: Tensor, factors=(0.25, 0.5, 1.0, 2.0, 4.0)) -> Tensor:
    """Biased squared MMD under an averaged family of Gaussian kernels.

    Bandwidths are ``factor * median pairwise distance`` of the pooled set.
    """
    f, f2 = T.as_tensor(f), T.as_tensor(f2)
    if f.shape[0] == 0 or f2.shape[0] == 0:
        raise ValueError("mmd needs two non-empty feature sets")
    if f.shape[1] != f2.shape[1]:
        raise ValueError(f"feature dims differ: {f.shape[1]} vs {f2.shape[1]}")
    n = f.shape[0]
    d2 = _pairwise_sq_dists(T.concat([f, f2], axis=0))
    med = median_sq_distance(d2) if d2.shape[0] > 1 else None
    if med is None or med.item() <= 0.0:
        med = Tensor(1.0)
    kernel = None
    for factor in factors:
        k = T.exp(-d2 / (med * (2.0 * factor * factor)))
        kernel = k if kernel is None else kernel + k
    kernel = kernel * (1.0 / len(factors))
    kxx = kernel[:n, :n].mean()
    kyy = kernel[n:, n:].mean()
    kxy = kernel[:n, n:].mean()
    return kxx + kyy - 2.0 * kxy


def bss_k(shape: tuple, fraction: float) -> int:
    return max(1, math.ceil(round(fraction * min(shape), 9)))


def bss(f: Tensor, fraction: float = 0.10) -> Tensor:
    """Sum of squared singular values over the smallest ceil(fraction * min(B, D)).

    The VJP of an eigenvalue lambda_k of F F^T is 2 u_k u_k^T F (and
    2 F v_k v_k^T for F^T F), so no SVD derivative is needed.
    """
    f = T.as_tensor(f)
    if f.ndim != 2 or min(f.shape) < 1:
        raise ValueError(f"bss needs a non-empty matrix, got shape {f.shape}")
    k = bss_k(f.shape, fraction)
    data = np.asarray(f.data, dtype=np.float64)
    w, v, side = gram_spectrum(data)
    basis = v[:, :k]

    def vjp(g):
        if side == "rows":
            grad = 2.0 * basis @ (basis.T @ data)
        else:
            grad = 2.0 * (data @ basis) @ basis.T
        return ((g * grad).astype(f.data.dtype),)

    return make_op(np.asarray(w[:k].sum()), (f,), vjp)


def uncertainty_total(losses: Sequence[Tensor], log_var: Tensor) -> Tensor:
    """sum_i L_i / (2 sigma_i^2) + log sigma_i^2 with log sigma_i^2 = log_var[i]."""
    if len(losses) != log_var.shape[-1]:
        raise ValueError(f"{len(losses)} losses for {log_var.shape[-1]} log-variances")
    stacked = T.concat([T.as_tensor(l).reshape(1) for l in losses], axis=0)
    return (0.5 * T.exp(-log_var) * stacked + log_var).sum()


def center_halves(centers: Sequence, rng_fallback_order: Optional[np.ndarray] = None):
    """Split batch rows into two groups by center id, else into first/second half."""
    centers = np.asarray(centers)
    unique = sorted(set(centers.tolist()))
    if len(unique) >= 2:
        group_a = set(unique[0::2])
        a = np.array([c in group_a for c in centers])
        return np.flatnonzero(a), np.flatnonzero(~a)
    order = np.arange(len(centers)) if rng_fallback_order is None else rng_fallback_order
    half = len(order) // 2
    return np.sort(order[:half]), np.sort(order[half:])


@dataclass
class LossBreakdown:
    objective: Tensor                      # differentiable part that is back-propagated
    value: float                           # full scalar including the decay term
    focal: list = field(default_factory=list)
    ce: list = field(default_factory=list)
    mmd: float = 0.0
    bss: float = 0.0
    decay: float = 0.0
    sigma2: Optional[np.ndarray] = None

    def components(self) -> dict:
        out = {"mmd": self.mmd, "bss": self.bss, "decay": self.decay}
        for t in range(len(self.focal)):
            out[f"focal_{t + 1}"] = self.focal[t]
            out[f"ce_{t + 1}"] = self.ce[t]
        return out


def parameter_norm_sq(params: Sequence[Tensor]) -> Tensor:
    total = None
    for p in params:
        term = (p * p).sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def final_loss(output, subtypes, centers, params: Sequence[Tensor], cfg: LossConfig,
               state: UncertaintyState, weights: Sequence[TaskWeights],
               decay_on_tape: bool = False) -> LossBreakdown:
    """Sum over tasks of the weighted four-component loss, plus beta * ||theta||^2.

    The decay term is always part of ``value``; it joins ``objective`` only
    when ``decay_on_tape`` is set (training applies it as decoupled decay).
    """
    subtypes = np.asarray(subtypes)
    features = output.features
    zero = Tensor(0.0)

    a, b = center_halves(centers)
    if len(a) and len(b):
        l_mmd = mmd(features[a], features[b], cfg.bandwidth_factors)
    else:
        l_mmd = zero
    l_bss = bss(features, cfg.bss_fraction)

    objective = None
    focal_vals, ce_vals = [], []
    for t in range(1, N_TASKS + 1):
        rows, y = task_masks(subtypes, t)
        if len(rows):
            p = output.probs[t - 1][rows]
            tw = weights[t - 1]
            l_focal = focal_loss(p, y, tw.alpha, tw.gamma, cfg.prob_eps)
            l_ce = cross_entropy(p, y, cfg.prob_eps)
        else:
            l_focal = l_ce = zero
        focal_vals.append(l_focal.item())
        ce_vals.append(l_ce.item())
        parts = [l_focal, l_ce, l_mmd, l_bss]
        if cfg.fixed_lambda is not None:
            task_total = None
            for lam, part in zip(cfg.fixed_lambda, parts):
                task_total = part * lam if task_total is None else task_total + part * lam
        else:
            task_total = uncertainty_total(parts, state.log_var[t - 1])
        objective = task_total if objective is None else objective + task_total

    if decay_on_tape:
        decay = parameter_norm_sq(params) * cfg.weight_decay
        objective = objective + decay
    else:
        with T.no_grad():
            decay = parameter_norm_sq(params) * cfg.weight_decay
    return LossBreakdown(
        objective=objective,
        value=objective.item() + (0.0 if decay_on_tape else decay.item()),
        focal=focal_vals,
        ce=ce_vals,
        mmd=l_mmd.item(),
        bss=l_bss.item(),
        decay=decay.item(),
        sigma2=state.sigma2(),
    )
