"""Competitor pipelines: hand-crafted lesion features, deep features, classical classifiers.

The radiomics-style set is a reduced, fixed-length (20) vector:

    first order  mean, variance, skewness, kurtosis, p10, p50, p90, energy,
                 entropy, minimum, maximum, mean absolute deviation
    shape        volume, surface area, sphericity, maximum 3D diameter
    GLCM         contrast, correlation, homogeneity, energy
                 (distance 1, symmetric, averaged over the 13 3D directions)
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.spatial.distance import pdist
from sklearn.ensemble import GradientBoostingClassifier
from sklearn.neural_network import MLPClassifier
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from .attribution import as_batch
from .errors import InvalidInputError
from .models import ModelState

RADIOMICS_NAMES = (
    "mean", "variance", "skewness", "kurtosis", "p10", "p50", "p90", "energy", "entropy",
    "minimum", "maximum", "mean_abs_dev",
    "volume", "surface_area", "sphericity", "max_diameter",
    "glcm_contrast", "glcm_correlation", "glcm_homogeneity", "glcm_energy",
)
N_BINS = 32
CLASSIFIERS = ("svm", "gbt", "mlp")


@dataclass
class FeatureVector:
    values: np.ndarray
    source: str
    id: str = ""


def _directions_13():
    dirs = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        if d == (0, 0, 0):
            continue
        # keep one of each +/- pair
        if next(c for c in d if c != 0) > 0:
            dirs.append(d)
    return dirs


DIRECTIONS = _directions_13()


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.clip(values, 0.0, 1.0) * N_BINS), 0, N_BINS - 1).astype(np.int64)


def _pairs(arr: np.ndarray, mask: np.ndarray, d):
    """Aligned (a, b) voxel views where both ends of offset ``d`` exist."""
    src, dst = [], []
    for n, o in zip(arr.shape, d):
        src.append(slice(max(0, -o), n - max(0, o)))
        dst.append(slice(max(0, o), n - max(0, -o)))
    a, b = arr[tuple(src)], arr[tuple(dst)]
    keep = mask[tuple(src)] & mask[tuple(dst)]
    return a[keep], b[keep]


def glcm_features(volume: np.ndarray, mask: np.ndarray) -> np.ndarray:
    q = _quantize(volume)
    stats = []
    for d in DIRECTIONS:
        a, b = _pairs(q, mask, d)
        if a.size == 0:
            continue
        P = np.zeros((N_BINS, N_BINS))
        np.add.at(P, (a, b), 1.0)
        P = P + P.T
        P /= P.sum()
        i, j = np.indices(P.shape)
        mu_i = (i * P).sum()
        mu_j = (j * P).sum()
        sd_i = np.sqrt((((i - mu_i) ** 2) * P).sum())
        sd_j = np.sqrt((((j - mu_j) ** 2) * P).sum())
        contrast = (((i - j) ** 2) * P).sum()
        corr = 1.0 if sd_i * sd_j < 1e-12 else (((i - mu_i) * (j - mu_j) * P).sum() / (sd_i * sd_j))
        homog = (P / (1.0 + (i - j) ** 2)).sum()
        energy = (P ** 2).sum()
        stats.append((contrast, corr, homog, energy))
    if not stats:
        return np.array([0.0, 1.0, 1.0, 1.0])
    return np.mean(stats, axis=0)


def _surface_area(mask: np.ndarray, spacing) -> float:
    padded = np.pad(mask, 1)
    area = 0.0
    for axis in range(3):
        faces = np.abs(np.diff(padded.astype(np.int8), axis=axis)).sum()
        others = [s for k, s in enumerate(spacing) if k != axis]
        area += faces * others[0] * others[1]
    return float(area)


def _max_diameter(mask: np.ndarray, spacing) -> float:
    pts = np.argwhere(mask)
    if len(pts) < 2:
        return 0.0
    # the farthest pair lies on the boundary
    interior = mask.copy()
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(mask, step, axis=axis)
    boundary = np.argwhere(mask & ~interior)
    if len(boundary) > 4000:
        boundary = boundary[:: len(boundary) // 4000 + 1]
    return float(pdist(boundary * np.asarray(spacing)).max()) if len(boundary) > 1 else 0.0


def extract_radiomics_features(volume: np.ndarray, lesion, spacing=(1.0, 1.0, 1.0), id: str = "") -> FeatureVector:
    mask = np.asarray(getattr(lesion, "voxels", lesion)).astype(bool)
    volume = np.asarray(volume, dtype=np.float64)
    if mask.shape != volume.shape:
        raise InvalidInputError(f"lesion mask {mask.shape} does not match volume {volume.shape}")
    if not mask.any():
        raise InvalidInputError(f"{id or 'volume'}: lesion mask is empty")
    v = volume[mask]
    mean = v.mean()
    var = 0.0 if v.min() == v.max() else float(v.var())
    sd = np.sqrt(var)
    skew = 0.0 if sd < 1e-12 else float(np.mean((v - mean) ** 3) / sd ** 3)
    kurt = 0.0 if sd < 1e-12 else float(np.mean((v - mean) ** 4) / var ** 2)
    p10, p50, p90 = np.percentile(v, [10, 50, 90])
    hist = np.bincount(_quantize(v), minlength=N_BINS) / v.size
    hist = hist[hist > 0]
    entropy = float(-(hist * np.log2(hist)).sum()) + 0.0
    voxel_vol = float(np.prod(spacing))
    n_vox = int(mask.sum())
    vol = n_vox * voxel_vol
    area = _surface_area(mask, spacing)
    sphericity = float(np.pi ** (1 / 3) * (6 * vol) ** (2 / 3) / area)
    values = np.array([
        mean, var, skew, kurt, p10, p50, p90, float((v ** 2).sum()), entropy,
        v.min(), v.max(), np.abs(v - mean).mean(),
        vol, area, sphericity, _max_diameter(mask, spacing),
        *glcm_features(volume, mask),
    ], dtype=np.float64)
    return FeatureVector(values, "radiomics", id)


def extract_deep_features(model: ModelState, volume, id: str = "") -> FeatureVector:
    """Globally pooled activations feeding the final linear layer."""
    captured = {}

    def hook(_module, inputs):
        captured["f"] = inputs[0]

    fc = model.net.fc
    handle = fc.register_forward_pre_hook(hook)
    was = model.net.training
    model.net.eval()
    try:
        with torch.no_grad():
            model.net(as_batch(volume, dtype=next(model.net.parameters()).dtype))
    finally:
        handle.remove()
        model.net.train(was)
    return FeatureVector(captured["f"][0].cpu().numpy().astype(np.float64), "deep", id)


# --------------------------------------------------------------------------- classifiers


@dataclass
class FeatureClassifier:
    kind: str
    scaler: StandardScaler
    model: object
    provenance: dict = field(default_factory=dict)

    def transform(self, X) -> np.ndarray:
        return self.scaler.transform(np.asarray(X, dtype=np.float64))

    def predict_proba(self, X) -> np.ndarray:
        return self.model.predict_proba(self.transform(X))


def make_estimator(kind: str, seed: int = 0):
    if kind == "svm":
        return SVC(kernel="rbf", C=1.0, gamma="scale", probability=True, random_state=seed)
    if kind == "gbt":
        return GradientBoostingClassifier(n_estimators=50, max_depth=2, learning_rate=0.1, random_state=seed)
    if kind == "mlp":
        return MLPClassifier(hidden_layer_sizes=(32,), alpha=1e-3, max_iter=2000, random_state=seed)
    raise InvalidInputError(f"unknown classifier kind {kind!r}; expected one of {CLASSIFIERS}")


def fit_classifier(X, y, kind: str, seed: int = 0, fold: Optional[int] = None) -> FeatureClassifier:
    """Standardise on the training fold, then fit one of svm / gbt / mlp."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    if len(np.unique(y)) < 2:
        raise InvalidInputError(f"fold {fold}: training labels contain a single class")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError(f"fold {fold}: non-finite feature values")
    scaler = StandardScaler().fit(X)
    est = make_estimator(kind, seed).fit(scaler.transform(X), y)
    prov = {"fit_on": "train", "fold": fold, "n_train": int(len(y)), "kind": kind, "seed": seed}
    return FeatureClassifier(kind, scaler, est, prov)


def predict(clf: FeatureClassifier, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return clf.predict_proba(X)
