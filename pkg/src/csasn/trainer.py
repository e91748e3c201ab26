"""Optimisation loop (AdamW, cosine schedule, clipping), evaluation and ablations."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Sample
from .loss import LossConfig, UncertaintyState, final_loss, task_weights
from .metrics import MetricsReport, task_report
from .model import CSASN, ModelConfig, VARIANTS
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    epochs: int = 30
    batch_size: int = 16
    clip_norm: float = 1.0
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    eta_min: float = 0.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")


# optimiser pieces ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def optimizer_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
                   cfg: TrainConfig, lr: float, decay_mask: Optional[Sequence[bool]] = None) -> None:
    """AdamW: bias-corrected Adam update plus decay decoupled from the moments."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        step = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + cfg.eps)
        wd = cfg.weight_decay if decay_mask is None or decay_mask[i] else 0.0
        p.data = (p.data - step - lr * wd * p.data).astype(p.data.dtype)


def cosine_lr(t: float, total: float, lr0: float, eta_min: float = 0.0) -> float:
    if t < 0 or t > total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    if total == 0:
        return lr0
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * t / total))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float = 1.0):
    """Scale all gradients by max_norm / total_norm when the global L2 norm exceeds it."""
    total = math.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for g in grads))
    if total > max_norm:
        # a few ulps of headroom so rounding in 32-bit grads cannot lift the norm past max_norm
        eps = max(np.finfo(np.result_type(g, np.float32)).eps for g in grads)
        scale = max_norm / total * (1.0 - 4.0 * eps)
        grads = [g * scale for g in grads]
    return list(grads), total


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for g in grads))


def stratified_batches(codes: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches with every subtype spread evenly across them.

    Indices are dealt round-robin from a class-sorted, per-class shuffled
    sequence, so each batch gets its proportional share of every class.
    No batch is smaller than ``batch_size`` unless the whole set is.
    """
    codes = np.asarray(codes)
    n_batches = max(1, len(codes) // batch_size)
    seq = np.concatenate([rng.permutation(np.flatnonzero(codes == c)) for c in np.unique(codes)])
    batches = [rng.permutation(seq[b::n_batches]) for b in range(n_batches)]
    return [batches[i] for i in rng.permutation(n_batches)]


# fitting ------------------------------------------------------------------------

@dataclass
class FitResult:
    model: CSASN
    state: UncertaintyState
    history: list = field(default_factory=list)      # one dict per epoch
    step_log: list = field(default_factory=list)     # one dict per (step, task)
    grad_norms: list = field(default_factory=list)   # (pre-clip, post-clip) per step
    lrs: list = field(default_factory=list)


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([np.asarray(s.image) for s in samples]).astype(T.get_dtype())


def fit(model: CSASN, samples: Sequence[Sample], loss_cfg: LossConfig = LossConfig(),
        cfg: TrainConfig = TrainConfig(), state: Optional[UncertaintyState] = None) -> FitResult:
    """Minimise the composite objective over ``cfg.epochs`` epochs.

    The decay term is applied as AdamW's decoupled decay, so the tape holds
    only the data terms; the logged loss includes the decay value.  The
    uncertainty log-variances are optimised alongside but never decayed.
    """
    if not samples:
        raise ValueError("fit needs a non-empty training set")
    images = stack_images(samples)
    codes = np.array([s.code for s in samples])
    centers = np.array([s.center_id for s in samples])
    weights = task_weights(codes, loss_cfg)
    state = state if state is not None else UncertaintyState()

    params = model.parameters()
    trainable = params + [state.log_var]
    decay_mask = [True] * len(params) + [False]
    adam = AdamState.zeros_like(trainable)
    result = FitResult(model, state)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs - 1, cfg.lr0, cfg.eta_min)
        result.lrs.append(lr)
        sums: dict = {}
        n_steps = 0
        for batch in stratified_batches(codes, cfg.batch_size, rng):
            drop_rng = np.random.default_rng([cfg.seed, epoch, step])
            out = model(images[batch], rng=drop_rng)
            lb = final_loss(out, codes[batch], centers[batch], params, loss_cfg, state, weights)
            _check_finite(lb, epoch, step)
            for p in trainable:
                p.grad = None
            lb.objective.backward()
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in trainable]
            grads, pre = clip_grad_norm(grads, cfg.clip_norm)
            result.grad_norms.append((pre, global_norm(grads)))
            optimizer_step(trainable, grads, adam, cfg, lr, decay_mask)

            row = {"loss": lb.value, **lb.components()}
            for key, value in row.items():
                sums[key] = sums.get(key, 0.0) + value
            for t in range(3):
                result.step_log.append({
                    "step": step, "task": t + 1, "focal": lb.focal[t], "ce": lb.ce[t],
                    "mmd": lb.mmd, "bss": lb.bss,
                    **{f"sigma2_{i + 1}": float(lb.sigma2[t, i]) for i in range(4)},
                })
            step += 1
            n_steps += 1
        entry = {"epoch": epoch, "lr": lr}
        entry.update({k: v / n_steps for k, v in sums.items()})
        sigma2 = state.sigma2()
        for t in range(3):
            for i in range(4):
                entry[f"sigma2_t{t + 1}_{i + 1}"] = float(sigma2[t, i])
        result.history.append(entry)
        logger.info("epoch %d lr %.3g loss %.5f", epoch, lr, entry["loss"])
    model.eval()
    return result


def _check_finite(lb, epoch: int, step: int) -> None:
    parts = {"objective": lb.value, "mmd": lb.mmd, "bss": lb.bss}
    for t in range(len(lb.focal)):
        parts[f"focal_{t + 1}"] = lb.focal[t]
        parts[f"ce_{t + 1}"] = lb.ce[t]
    bad = [name for name, value in parts.items() if not math.isfinite(value)]
    if bad:
        raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {', '.join(bad)}")


# inference and evaluation -------------------------------------------------------------

def predict_positive(model: CSASN, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Positive-class probability per task, [N, 3], in evaluation mode.

    The backbone runs in chunks; the head sees the whole set as one batch.
    """
    model.eval()
    with T.no_grad():
        feats = [model.encode(images[i:i + chunk])[0].data for i in range(0, len(images), chunk)]
        probs = model.head(Tensor(np.concatenate(feats)))
    return np.stack([p.data[:, 1] for p in probs], axis=1).astype(np.float64)


def evaluate(model: CSASN, samples: Sequence[Sample]) -> MetricsReport:
    if not samples:
        raise ValueError("evaluate needs a non-empty sample set")
    probs = predict_positive(model, stack_images(samples))
    return task_report([s.code for s in samples], probs)


def run_ablation(variant: str, train: Sequence[Sample], test: Sequence[Sample],
                 model_cfg: ModelConfig = ModelConfig(), loss_cfg: LossConfig = LossConfig(),
                 train_cfg: TrainConfig = TrainConfig()):
    """Train and evaluate one variant with the shared seed and schedule.

    Returns (MetricsReport, FitResult).
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    model = CSASN(replace(model_cfg, variant=variant), seed=train_cfg.seed)
    result = fit(model, train, loss_cfg, train_cfg)
    return evaluate(model, test), result
