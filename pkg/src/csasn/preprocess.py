"""Frequency-domain band-pass cleanup, spatial augmentation and oversampling."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class FilterSpec:
    """Radial DCT band, expressed at ``reference_size`` and rescaled per image."""

    d_low: float = 10.0
    d_high: float = 100.0
    reference_size: int = 224

    def __post_init__(self):
        if not 0 <= self.d_low < self.d_high:
            raise ValueError(f"need 0 <= d_low < d_high, got {self.d_low}, {self.d_high}")
        if self.reference_size < 1:
            raise ValueError("reference_size must be positive")


@dataclass(frozen=True)
class AugmentSpec:
    brightness_delta_range: tuple = (-0.2, 0.2)
    contrast_scale_range: tuple = (0.8, 1.25)
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5


@lru_cache(maxsize=32)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis: row u holds C(u) cos(pi (2m+1) u / 2n)."""
    m = np.arange(n)
    u = m[:, None]
    basis = np.cos(np.pi * (2 * m[None, :] + 1) * u / (2 * n))
    scale = np.full(n, np.sqrt(2.0 / n))
    scale[0] = np.sqrt(1.0 / n)
    basis = basis * scale[:, None]
    basis.setflags(write=False)
    return basis


def dct2(img: np.ndarray) -> np.ndarray:
    """Separable orthonormal 2D DCT-II: rows, then columns."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 1:
        raise ValueError(f"dct2 expects a non-empty 2D image, got shape {x.shape}")
    return dct_matrix(x.shape[0]) @ x @ dct_matrix(x.shape[1]).T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim != 2 or min(c.shape) < 1:
        raise ValueError(f"idct2 expects a non-empty 2D grid, got shape {c.shape}")
    return dct_matrix(c.shape[0]).T @ c @ dct_matrix(c.shape[1])


def band_mask(shape: tuple, spec: FilterSpec) -> np.ndarray:
    """Boolean mask of coefficients whose radial index distance lies in the band."""
    m, n = shape
    scale = max(m, n) / spec.reference_size
    u = np.arange(m)[:, None]
    v = np.arange(n)[None, :]
    dist = np.sqrt(u * u + v * v)
    return (dist >= spec.d_low * scale) & (dist <= spec.d_high * scale)


def bandpass_filter(img: np.ndarray, spec: FilterSpec = FilterSpec(), clamp: bool = True) -> np.ndarray:
    out = idct2(dct2(img) * band_mask(np.shape(img), spec))
    return np.clip(out, 0.0, 1.0) if clamp else out


def augment(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Brightness shift, contrast scaling about the mean, random flips, clamp."""
    x = np.asarray(img, dtype=np.float64)
    delta = rng.uniform(*spec.brightness_delta_range)
    scale = rng.uniform(*spec.contrast_scale_range)
    flip_h = rng.random() < spec.flip_h_prob
    flip_v = rng.random() < spec.flip_v_prob
    mu = x.mean()
    x = (x - mu) * scale + mu + delta
    if flip_h:
        x = x[:, ::-1]
    if flip_v:
        x = x[::-1, :]
    return np.clip(x, 0.0, 1.0)


def oversample(samples: Sequence, factor: int, rng: np.random.Generator) -> list:
    """Replicate every malignant sample ``factor`` times, then shuffle.

    Each returned sample gets a fresh ``aug_seed`` so replicas are augmented
    independently; benign samples appear once.
    """
    if factor < 1:
        raise ValueError(f"oversampling factor must be >= 1, got {factor}")
    out = []
    for s in samples:
        copies = factor if s.malignancy else 1
        for _ in range(copies):
            out.append(dataclasses.replace(s, aug_seed=int(rng.integers(2**63 - 1))))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def prepare_training_samples(samples: Sequence, factor: int = 9, rng: Optional[np.random.Generator] = None,
                             filter_spec: Optional[FilterSpec] = FilterSpec(),
                             augment_spec: Optional[AugmentSpec] = AugmentSpec()) -> list:
    """filter -> oversample -> augment each replica with its own seed."""
    rng = rng if rng is not None else np.random.default_rng(0)
    filtered = filter_samples(samples, filter_spec)
    replicas = oversample(filtered, factor, rng)
    if augment_spec is None:
        return replicas
    return [
        dataclasses.replace(s, image=augment(s.image, augment_spec, np.random.default_rng(s.aug_seed)))
        for s in replicas
    ]


def filter_samples(samples: Sequence, filter_spec: Optional[FilterSpec] = FilterSpec()) -> list:
    if filter_spec is None:
        return list(samples)
    return [dataclasses.replace(s, image=bandpass_filter(s.image, filter_spec)) for s in samples]
