"""scikit-learn style wrappers around the band-pass filter and the CSASN model."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .data import SUBTYPES, Sample
from .loss import LossConfig
from .metrics import task_report
from .model import VARIANTS, CSASN, ModelConfig
from .preprocess import FilterSpec, bandpass_filter
from .trainer import TrainConfig, fit, predict_positive


def check_images(X, square_multiple: Optional[int] = None) -> np.ndarray:
    """Validate an image stack [n, H, W] with finite values in [0, 1]."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected images of shape [n, H, W], got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    if square_multiple and (X.shape[1] % square_multiple or X.shape[2] % square_multiple):
        raise ValueError(f"image sides must be multiples of {square_multiple}, got {X.shape[1:]}")
    return X


def encode_subtypes(y) -> np.ndarray:
    """Subtype names or integer codes -> codes 0..3."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D, got shape {y.shape}")
    if y.dtype.kind in "US":
        unknown = sorted(set(y.tolist()) - set(SUBTYPES))
        if unknown:
            raise ValueError(f"unknown subtypes {unknown}")
        return np.array([SUBTYPES.index(v) for v in y.tolist()])
    codes = y.astype(int)
    if np.any(codes != y) or codes.min() < 0 or codes.max() >= len(SUBTYPES):
        raise ValueError(f"integer labels must be codes 0..{len(SUBTYPES) - 1}")
    return codes


class DCTBandpass(TransformerMixin, BaseEstimator):
    """Stateless radial DCT band-pass applied image by image."""

    def __init__(self, d_low: float = 10.0, d_high: float = 100.0, reference_size: int = 224, clamp: bool = True):
        self.d_low = d_low
        self.d_high = d_high
        self.reference_size = reference_size
        self.clamp = clamp

    def fit(self, X, y=None):
        X = check_images(X)
        self.spec_ = FilterSpec(self.d_low, self.d_high, self.reference_size)
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        X = check_images(X)
        return np.stack([bandpass_filter(img, self.spec_, self.clamp) for img in X])


class CSASNClassifier(ClassifierMixin, BaseEstimator):
    """Three Benign-vs-subtype heads trained jointly on an image stack.

    ``predict_task_proba`` gives the positive probability of each task
    (ATC, FTC, MTC).  ``predict`` returns the subtype whose task is most
    confident, or Benign when no task crosses 0.5.  ``score`` is macro-AUC.
    """

    def __init__(self, variant: str = "full", epochs: int = 30, lr0: float = 1e-4, batch_size: int = 16,
                 clip_norm: float = 1.0, weight_decay: float = 1e-4, dropout: float = 0.5,
                 seed: int = 0, precision: str = "f32"):
        self.variant = variant
        self.epochs = epochs
        self.lr0 = lr0
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.seed = seed
        self.precision = precision

    def fit(self, X, y, centers=None):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        X = check_images(X, square_multiple=32)
        codes = encode_subtypes(y)
        if len(codes) != len(X):
            raise ValueError(f"X has {len(X)} images but y has {len(codes)} labels")
        centers = ["C0"] * len(X) if centers is None else [str(c) for c in centers]
        if len(centers) != len(X):
            raise ValueError("centers must align with X")
        self.classes_ = np.array(SUBTYPES)
        self.n_features_in_ = X.shape[1] * X.shape[2]
        samples = [Sample(img, SUBTYPES[c], f"S{i}", centers[i]) for i, (img, c) in enumerate(zip(X, codes))]
        train_cfg = TrainConfig(lr0=self.lr0, epochs=self.epochs, batch_size=self.batch_size,
                                clip_norm=self.clip_norm, weight_decay=self.weight_decay, seed=self.seed)
        with T.precision(self.precision):
            model_cfg = ModelConfig(image_size=X.shape[1], dropout=self.dropout, variant=self.variant)
            self.model_ = CSASN(model_cfg, seed=self.seed)
            result = fit(self.model_, samples, LossConfig(weight_decay=self.weight_decay), train_cfg)
        self.uncertainty_ = result.state
        self.history_ = result.history
        return self

    def predict_task_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, square_multiple=32)
        with T.precision(self.precision):
            return predict_positive(self.model_, X.astype(T.get_dtype()))

    def predict(self, X) -> np.ndarray:
        probs = self.predict_task_proba(X)
        codes = np.where(probs.max(axis=1) >= 0.5, probs.argmax(axis=1) + 1, 0)
        return self.classes_[codes]

    def score(self, X, y, sample_weight=None) -> float:
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        report = task_report(encode_subtypes(y), self.predict_task_proba(X))
        if report.macro_auc is None:
            raise ValueError("macro-AUC undefined: no task has both classes")
        return report.macro_auc
