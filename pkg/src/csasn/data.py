"""Samples, a synthetic multi-center nodule generator, patient-level splits and manifests."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensor as T
from .images import read_image, write_image
from .loss import mmd

SUBTYPES = ("Benign", "ATC", "FTC", "MTC")
DEFAULT_CLASS_PROBS = (0.55, 0.10, 0.20, 0.15)
MANIFEST_HEADER = ["path", "subtype", "malignancy", "patient_id", "center_id"]


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    image: Optional[np.ndarray]
    subtype: str
    patient_id: str
    center_id: str = "C0"
    path: Optional[str] = None
    aug_seed: Optional[int] = None

    def __post_init__(self):
        if self.subtype not in SUBTYPES:
            raise ValueError(f"unknown subtype {self.subtype!r}")
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")

    @property
    def malignancy(self) -> int:
        return int(self.subtype != "Benign")

    @property
    def code(self) -> int:
        return SUBTYPES.index(self.subtype)


@dataclass(frozen=True)
class CenterProfile:
    brightness: float = 0.0
    contrast: float = 1.0


def default_center_profiles(n: int) -> list[CenterProfile]:
    if n < 1:
        raise ValueError("need at least one center")
    if n == 1:
        return [CenterProfile()]
    return [CenterProfile(float(b), float(c))
            for b, c in zip(np.linspace(-0.08, 0.08, n), np.linspace(0.85, 1.15, n))]


# synthetic nodules ------------------------------------------------------------

@dataclass(frozen=True)
class _Nodule:
    cy: float
    cx: float
    a: float
    b: float
    theta: float
    severity: float
    harmonics: tuple
    spots: tuple
    halo: float
    lobulation: float


def _draw_nodule(subtype: str, size: int, rng: np.random.Generator) -> _Nodule:
    c = size / 2
    cy, cx = c + rng.uniform(-0.12, 0.12, 2) * size
    a = rng.uniform(0.15, 0.22) * size
    b = a * rng.uniform(0.65, 1.0)
    severity = rng.uniform(0.5, 1.0) if subtype != "Benign" else 0.0
    n_harm = 6
    harmonics = tuple(
        (int(k), float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0.5, 1.0)))
        for k in rng.integers(5, 13, n_harm)
    )
    spots = ()
    if subtype == "MTC":
        n_spots = int(rng.integers(4, 9))
    else:
        n_spots = int(rng.random() < 0.25)          # benign-looking single echo
    if n_spots:
        r = np.sqrt(rng.uniform(0, 0.6, n_spots))
        ang = rng.uniform(0, 2 * np.pi, n_spots)
        spots = tuple(zip(r.tolist(), ang.tolist()))
    halo = severity if subtype == "FTC" else rng.uniform(0, 0.25) * (rng.random() < 0.3)
    lobulation = severity if subtype == "ATC" else rng.uniform(0, 0.25)
    return _Nodule(cy, cx, a, b, rng.uniform(0, np.pi), severity, harmonics, spots, halo, lobulation)


def _render(subtype: str, nod: _Nodule, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - nod.cy, xx - nod.cx
    ct, st = np.cos(nod.theta), np.sin(nod.theta)
    u = (dx * ct + dy * st) / nod.a
    v = (-dx * st + dy * ct) / nod.b
    rho = np.sqrt(u * u + v * v)
    phi = np.arctan2(v, u)

    # low-frequency shading plus multiplicative speckle
    shading = gaussian_filter(rng.normal(0, 1, (size, size)), size / 6)
    shading = shading / (np.abs(shading).max() + 1e-12)
    img = 0.48 + 0.05 * shading

    edge = np.ones_like(phi)
    for k, phase, w in nod.harmonics:
        edge = edge + 0.05 * nod.lobulation * w * np.sin(k * phi + phase)
    interior = 1.0 / (1.0 + np.exp(-(edge - rho) / (0.04 if subtype != "ATC" else 0.02)))

    if subtype == "ATC":
        depth = 0.28 + 0.14 * nod.severity
    elif subtype == "FTC":
        depth = 0.16
    else:
        depth = 0.22
    img = img - depth * interior
    if subtype == "ATC":
        rim = np.exp(-((rho - edge) / 0.06) ** 2)
        img = img + 0.10 * nod.severity * rim * (rng.random((size, size)) < 0.6)

    if nod.halo > 0:
        halo = np.exp(-((rho - 1.55) / 0.35) ** 2)
        img = img - 0.20 * nod.halo * halo

    for r, ang in nod.spots:
        sy = nod.cy + r * (nod.b * np.sin(ang) * ct + nod.a * np.cos(ang) * st)
        sx = nod.cx + r * (nod.a * np.cos(ang) * ct - nod.b * np.sin(ang) * st)
        strength = 0.35 + 0.25 * nod.severity if subtype == "MTC" else 0.25
        img = img + strength * np.exp(-((yy - sy) ** 2 + (xx - sx) ** 2) / (2 * 1.2 ** 2))

    speckle = gaussian_filter(rng.gamma(6.0, 1.0 / 6.0, (size, size)), 0.6)
    return img * speckle


def generate_synthetic(n_patients: int, class_probs: Sequence[float] = DEFAULT_CLASS_PROBS,
                       center_profiles: Optional[Sequence[CenterProfile]] = None,
                       rng: Optional[np.random.Generator] = None, image_size: int = 64,
                       max_images_per_patient: int = 2) -> list[Sample]:
    """Deterministic (per rng state) multi-center dataset of synthetic nodules.

    Subtype textures: Benign smooth ellipse; ATC ragged high-contrast margin;
    FTC diffuse low-contrast halo; MTC bright punctate spots.  Each center
    applies its own brightness offset and contrast scale.
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    if probs.shape != (len(SUBTYPES),) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError(f"class_probs must be {len(SUBTYPES)} non-negative values summing to 1")
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    centers = list(center_profiles) if center_profiles else default_center_profiles(1)
    seeds = rng.integers(0, 2**63 - 1, size=n_patients)
    samples = []
    for i, seed in enumerate(seeds):
        prng = np.random.default_rng(int(seed))
        subtype = SUBTYPES[int(prng.choice(len(SUBTYPES), p=probs))]
        center = int(prng.integers(len(centers)))
        profile = centers[center]
        nodule = _draw_nodule(subtype, image_size, prng)
        n_images = int(prng.integers(1, max_images_per_patient + 1))
        for _ in range(n_images):
            img = _render(subtype, nodule, image_size, prng)
            img = (img - 0.5) * profile.contrast + 0.5 + profile.brightness
            samples.append(Sample(np.clip(img, 0.0, 1.0), subtype, f"P{i:05d}", f"C{center}"))
    return samples


# splits -----------------------------------------------------------------------

@dataclass
class SplitPlan:
    train_patient_ids: frozenset
    test_patient_ids: frozenset
    mmd_score: float = float("nan")
    candidate_scores: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.train_patient_ids & self.test_patient_ids:
            raise ValueError("train and test patient sets overlap")

    def partition(self, samples: Sequence[Sample]) -> tuple[list[Sample], list[Sample]]:
        train = [s for s in samples if s.patient_id in self.train_patient_ids]
        test = [s for s in samples if s.patient_id in self.test_patient_ids]
        return train, test


def patient_split(samples: Sequence[Sample], test_frac: float = 0.2,
                  rng: Optional[np.random.Generator] = None) -> SplitPlan:
    patients = sorted({s.patient_id for s in samples})
    if len(patients) < 2:
        raise ValueError(f"need at least 2 patients to split, got {len(patients)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_test = min(max(1, int(round(test_frac * len(patients)))), len(patients) - 1)
    order = rng.permutation(len(patients))
    test = frozenset(patients[i] for i in order[:n_test])
    return SplitPlan(frozenset(patients) - test, test)


def summary_features(img: np.ndarray, bins: int = 8) -> np.ndarray:
    """Per-image mean, variance and normalised 8-bin intensity histogram."""
    x = np.asarray(img, dtype=np.float64).ravel()
    hist, _ = np.histogram(x, bins=bins, range=(0.0, 1.0))
    return np.concatenate([[x.mean(), x.var()], hist / max(x.size, 1)])


def mmd_max_split(samples: Sequence[Sample], candidates: int = 32, rng: Optional[np.random.Generator] = None,
                  test_frac: float = 0.2) -> SplitPlan:
    """Best of ``candidates`` random patient splits by train/test MMD of image statistics."""
    if candidates < 1:
        raise ValueError("candidates must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    feats = np.stack([summary_features(s.image) for s in samples])
    ids = np.array([s.patient_id for s in samples])
    best, scores = None, []
    for _ in range(candidates):
        plan = patient_split(samples, test_frac, rng)
        in_test = np.array([p in plan.test_patient_ids for p in ids])
        with T.precision("f64"), T.no_grad():
            score = mmd(T.Tensor(feats[~in_test]), T.Tensor(feats[in_test])).item()
        scores.append(score)
        if best is None or score > best[0]:
            best = (score, plan)
    score, plan = best
    return SplitPlan(plan.train_patient_ids, plan.test_patient_ids, score, tuple(scores))


# manifests --------------------------------------------------------------------

def write_manifest(samples: Sequence[Sample], path, image_format: str = "png") -> list[Sample]:
    """Write images under the manifest's directory and the CSV index.

    Samples without a ``path`` get one of the form images/<patient>_<n>.<ext>.
    Returns the samples with their relative paths filled in.
    """
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    counters: dict = {}
    written = []
    for s in samples:
        rel = s.path
        if rel is None:
            n = counters.get(s.patient_id, 0)
            counters[s.patient_id] = n + 1
            rel = f"images/{s.patient_id}_{n}.{image_format}"
        if s.image is not None:
            write_image(root / rel, s.image)
        written.append(dataclasses.replace(s, path=rel))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for s in written:
            writer.writerow([s.path, s.subtype, s.malignancy, s.patient_id, s.center_id])
    return written


def load_manifest(path, load_images: bool = True) -> list[Sample]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    samples, seen = [], set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}:{line_no}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            rel, subtype, malignancy, patient_id, center_id = (c.strip() for c in row)
            if subtype not in SUBTYPES:
                raise ManifestError(f"{path}:{line_no}: unknown subtype {subtype!r}")
            if malignancy not in ("0", "1") or int(malignancy) != int(subtype != "Benign"):
                raise ManifestError(f"{path}:{line_no}: malignancy {malignancy!r} inconsistent with {subtype}")
            if not patient_id:
                raise ManifestError(f"{path}:{line_no}: empty patient_id")
            key = (patient_id, rel)
            if key in seen:
                raise ManifestError(f"{path}:{line_no}: duplicate entry for patient {patient_id} image {rel}")
            seen.add(key)
            image_path = root / rel
            if not image_path.exists():
                raise FileNotFoundError(f"{path}:{line_no}: missing image file {image_path}")
            image = read_image(image_path) if load_images else None
            samples.append(Sample(image, subtype, patient_id, center_id, rel))
    return samples
