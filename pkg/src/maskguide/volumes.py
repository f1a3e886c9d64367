"""Volume data model, CT preprocessing, augmentation, fold splitting and phantoms.

Arrays are stored in ``(H, W, D)`` order: two in-plane axes followed by the
slice axis. Networks consume them as ``(B, 1, H, W, D)``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import GenerationError, InvalidInputError

log = logging.getLogger(__name__)

LUNG_WINDOW_CENTER = -300.0
LUNG_WINDOW_WIDTH = 1200.0
MAX_SHIFT = 3


@dataclass
class RawVolume:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise InvalidInputError(f"volume {self.id!r} must be 3D and non-empty, got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise InvalidInputError(f"volume {self.id!r} has non-positive spacing {self.spacing}")


@dataclass
class ViewMask:
    voxels: np.ndarray
    view_index: int
    name: str = ""

    def __post_init__(self):
        self.voxels = (np.asarray(self.voxels) > 0).astype(np.uint8)
        if self.view_index < 1:
            raise InvalidInputError(f"view_index must be >= 1, got {self.view_index}")


@dataclass
class LabeledVolume:
    volume: np.ndarray
    label: int
    masks: list = field(default_factory=list)
    id: str = ""

    def __post_init__(self):
        self.volume = np.asarray(self.volume, dtype=np.float32)
        self.masks = sorted(self.masks, key=lambda m: m.view_index)
        for m in self.masks:
            if m.voxels.shape != self.volume.shape:
                raise InvalidInputError(
                    f"{self.id}: mask {m.name!r} shape {m.voxels.shape} != volume {self.volume.shape}"
                )

    def mask(self, view_index: int) -> ViewMask:
        for m in self.masks:
            if m.view_index == view_index:
                return m
        raise InvalidInputError(f"{self.id}: no mask with view_index {view_index}")

    def has_mask(self, view_index: int) -> bool:
        return any(m.view_index == view_index for m in self.masks)


def check_nesting(masks: Sequence[ViewMask]) -> bool:
    """True when every finer view lies inside every broader one."""
    ordered = sorted(masks, key=lambda m: m.view_index)
    for broad, fine in zip(ordered, ordered[1:]):
        if np.any(fine.voxels.astype(bool) & ~broad.voxels.astype(bool)):
            return False
    return True


@dataclass
class FoldSplit:
    fold_index: int
    train_ids: list
    val_ids: list
    test_ids: list


# --------------------------------------------------------------------------- preprocessing


def apply_window(hu: np.ndarray, center: float = LUNG_WINDOW_CENTER, width: float = LUNG_WINDOW_WIDTH) -> np.ndarray:
    """Clip to ``[center - width/2, center + width/2]`` and map linearly onto [0, 1]."""
    if not width > 0:
        raise InvalidInputError(f"window width must be positive, got {width}")
    lo = center - width / 2.0
    hu = np.nan_to_num(np.asarray(hu, dtype=np.float64), nan=lo, posinf=lo + width, neginf=lo)
    return (np.clip(hu, lo, lo + width) - lo) / width


def nearest_indices(n_in: int, spacing_in: float, spacing_out: float) -> np.ndarray:
    """Input index whose voxel contains each output voxel centre."""
    n_out = max(1, int(round(n_in * spacing_in / spacing_out)))
    centres = (np.arange(n_out) + 0.5) * spacing_out / spacing_in
    return np.minimum(np.floor(centres).astype(np.int64), n_in - 1)


def resample_nearest(voxels: np.ndarray, spacing, target_spacing) -> np.ndarray:
    if np.isscalar(target_spacing):
        target_spacing = (target_spacing,) * 3
    if any(not s > 0 for s in list(spacing) + list(target_spacing)):
        raise InvalidInputError(f"spacing must be positive: {spacing} -> {target_spacing}")
    idx = [nearest_indices(n, s, t) for n, s, t in zip(voxels.shape, spacing, target_spacing)]
    return voxels[np.ix_(*idx)]


def bbox_center(mask: np.ndarray) -> Optional[np.ndarray]:
    nz = np.argwhere(mask)
    if nz.size == 0:
        return None
    return (nz.min(axis=0) + nz.max(axis=0) + 1) / 2.0


def crop_or_pad(arr: np.ndarray, shape, center) -> np.ndarray:
    """Extract a ``shape`` window centred on ``center``; out-of-range voxels become 0."""
    shape = tuple(arr.shape[a] if s is None else int(s) for a, s in enumerate(shape))
    out = np.zeros(shape, dtype=arr.dtype)
    src, dst = [], []
    for n, size, c in zip(arr.shape, shape, center):
        start = int(np.floor(c - size / 2.0))
        lo, hi = max(start, 0), min(start + size, n)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _plan_geometry(raw: RawVolume, target_spacing, crop_shape, center_mask, windowed):
    resampled_mask = None
    if center_mask is not None:
        resampled_mask = resample_nearest(np.asarray(center_mask), raw.spacing, target_spacing)
        fg = resampled_mask > 0
    else:
        fg = windowed > 0
    centre = bbox_center(fg)
    if centre is None:
        log.warning("volume %r: empty foreground, cropping around the volume centre", raw.id)
        centre = np.asarray(windowed.shape) / 2.0
    if crop_shape is None:
        crop_shape = (None, None, None)
    return tuple(crop_shape), centre


def preprocess(
    raw: RawVolume,
    window_center: float = LUNG_WINDOW_CENTER,
    window_width: float = LUNG_WINDOW_WIDTH,
    target_spacing=(1.0, 1.0, 1.0),
    crop_shape=(324, 324, None),
    center_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Resample, window, normalise and crop a CT volume.

    The crop is centred on the bounding box of ``center_mask`` (typically the
    lungs) or, without a mask, of every voxel above the window floor. A ``None``
    entry in ``crop_shape`` keeps that axis at its resampled extent.
    """
    voxels = resample_nearest(raw.voxels, raw.spacing, target_spacing)
    windowed = apply_window(voxels, window_center, window_width)
    crop, centre = _plan_geometry(raw, target_spacing, crop_shape, center_mask, windowed)
    return crop_or_pad(windowed, crop, centre).astype(np.float32)


def preprocess_labeled(
    raw: RawVolume,
    label: int,
    masks: Sequence[ViewMask],
    window_center: float = LUNG_WINDOW_CENTER,
    window_width: float = LUNG_WINDOW_WIDTH,
    target_spacing=(1.0, 1.0, 1.0),
    crop_shape=(324, 324, None),
) -> LabeledVolume:
    """Preprocess a volume and carry its masks through the same geometry."""
    masks = sorted(masks, key=lambda m: m.view_index)
    centre_src = masks[0].voxels if masks else None
    voxels = resample_nearest(raw.voxels, raw.spacing, target_spacing)
    windowed = apply_window(voxels, window_center, window_width)
    crop, centre = _plan_geometry(raw, target_spacing, crop_shape, centre_src, windowed)
    out_masks = [
        ViewMask(crop_or_pad(resample_nearest(m.voxels, raw.spacing, target_spacing), crop, centre), m.view_index, m.name)
        for m in masks
    ]
    return LabeledVolume(crop_or_pad(windowed, crop, centre), label, out_masks, raw.id)


# --------------------------------------------------------------------------- augmentation


def shift_zero_fill(arr: np.ndarray, shift) -> np.ndarray:
    out = np.zeros_like(arr)
    src, dst = [], []
    for n, s in zip(arr.shape, tuple(shift) + (0,) * (arr.ndim - len(shift))):
        s = int(s)
        if abs(s) >= n:
            return out
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def apply_transform(v: LabeledVolume, shift=(0, 0), flip: bool = False) -> LabeledVolume:
    """Translate in-plane with zero fill, then optionally flip the vertical axis."""

    def tf(a):
        a = shift_zero_fill(a, shift)
        return np.ascontiguousarray(a[::-1]) if flip else a

    masks = [ViewMask(tf(m.voxels), m.view_index, m.name) for m in v.masks]
    return LabeledVolume(tf(v.volume), v.label, masks, v.id)


def sample_transform(rng_seed) -> tuple:
    rng = np.random.default_rng(rng_seed)
    shift = tuple(int(s) for s in rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2))
    flip = bool(rng.random() < 0.5)
    return shift, flip


def augment(v: LabeledVolume, rng_seed) -> LabeledVolume:
    shift, flip = sample_transform(rng_seed)
    return apply_transform(v, shift, flip)


# --------------------------------------------------------------------------- folds


def _fold_partitions(k: int) -> list:
    """Group indices of (train, val, test) for every fold."""
    out = []
    for f in range(k):
        val_g = (f + 1) % k if k > 2 else None
        train = [g for g in range(k) if g not in (f, val_g)]
        out.append((train, [] if val_g is None else [val_g], [f]))
    return out


def _balance_error(counts: np.ndarray, k: int) -> float:
    """Largest per-class deviation from the global proportion over all partitions."""
    totals = counts.sum(axis=0)
    n = totals.sum()
    worst = 0.0
    for parts in _fold_partitions(k):
        for groups in parts:
            if groups:
                have = counts[groups].sum(axis=0)
                worst = max(worst, float(np.abs(have - totals * have.sum() / n).max()))
    return worst


def _choose_extras(sizes, k, rng, max_tries=20000) -> np.ndarray:
    """Per-group class counts: each class splits evenly, remainders placed to keep every partition balanced."""
    base = np.array([[s // k for s in sizes]] * k)
    options = []
    for s in sizes:
        combos = list(itertools.combinations(range(k), s % k))
        options.append([combos[i] for i in rng.permutation(len(combos))])
    best, best_err = None, np.inf
    for tries, choice in enumerate(itertools.product(*options)):
        counts = base.copy()
        for c, groups in enumerate(choice):
            counts[list(groups), c] += 1
        err = _balance_error(counts, k)
        if err < best_err:
            best, best_err = counts, err
        if err <= 1.0 + 1e-9 or tries >= max_tries:
            break
    if best_err > 1.0 + 1e-9:
        log.warning("stratified folds: best class balance deviation %.3f exceeds 1 sample", best_err)
    return best


def stratified_folds(labels: Sequence[int], k: int = 5, rng_seed=0, ids: Optional[Sequence] = None) -> list:
    """Stratified k-fold split into train/val/test partitions.

    Every class is split as evenly as possible over ``k`` groups; the groups
    receiving a class's remainder are chosen so each train, validation and test
    partition stays within one sample of the global class proportion. Fold
    ``f`` tests on group ``f``, validates on group ``f+1`` and trains on the
    remaining ``k-2`` groups (60/20/20 for ``k=5``).
    """
    labels = list(labels)
    ids = list(range(len(labels))) if ids is None else list(ids)
    if len(ids) != len(labels):
        raise InvalidInputError("ids and labels differ in length")
    if k < 2:
        raise InvalidInputError(f"fold count must be >= 2, got {k}")
    rng = np.random.default_rng(rng_seed)
    classes = sorted(set(labels))
    members = {c: [i for i, y in zip(ids, labels) if y == c] for c in classes}
    for c in classes:
        if len(members[c]) < k:
            raise InvalidInputError(f"class {c} has {len(members[c])} members, fewer than k={k}")
    counts = _choose_extras([len(members[c]) for c in classes], k, rng)
    groups = [[] for _ in range(k)]
    for col, c in enumerate(classes):
        shuffled = [members[c][j] for j in rng.permutation(len(members[c]))]
        pos = 0
        for g in range(k):
            groups[g].extend(shuffled[pos:pos + counts[g, col]])
            pos += counts[g, col]
    folds = []
    for f, (train, val, test) in enumerate(_fold_partitions(k)):
        folds.append(FoldSplit(
            f,
            [i for g in train for i in groups[g]],
            [i for g in val for i in groups[g]],
            [i for g in test for i in groups[g]],
        ))
    return folds


# --------------------------------------------------------------------------- phantoms


@dataclass
class PhantomParams:
    """Knobs for the synthetic chest phantom.

    ``signal`` scales the class separation of the lesion relative to the
    surrounding lung; ``context_spread`` is the per-phantom random range of the
    lung level that the lesion is measured against. Large spread relative to
    ``signal`` makes the lesion alone ambiguous without its surroundings.
    """

    signal: float = 2.0
    signal_kind: str = "contrast"  # or "variance"
    context_spread: float = 0.3
    noise: float = 0.02
    lesion_scale: float = 1.4
    texture_sigma: float = 1.0


def _ellipsoid(grid_shape, centre, radii):
    axes = np.ogrid[tuple(slice(0, n) for n in grid_shape)]
    r2 = sum(((ax + 0.5 - c) / r) ** 2 for ax, c, r in zip(axes, centre, radii))
    return r2 <= 1.0


def _texture(rng, shape, sigma):
    t = rng.standard_normal(shape)
    if sigma > 0:
        t = ndimage.gaussian_filter(t, sigma)
    return t / (t.std() + 1e-12)


def make_phantom(label: int, grid, rng, params: PhantomParams, pid: str = "", max_tries: int = 50) -> LabeledVolume:
    H, W, D = grid
    lungs = np.zeros(grid, dtype=bool)
    lung_parts = []
    for side in (0.30, 0.70):
        centre = (H / 2 + rng.uniform(-2, 2), W * side + rng.uniform(-2, 2), D / 2 + rng.uniform(-1, 1))
        radii = tuple(r * rng.uniform(0.9, 1.1) for r in (0.30 * H, 0.18 * W, 0.38 * D))
        part = _ellipsoid(grid, centre, radii)
        lung_parts.append((part, centre, radii))
        lungs |= part

    base_r = np.array([0.11 * H, 0.11 * W, 0.14 * D]) * params.lesion_scale
    lesion = None
    for _ in range(max_tries):
        part, c, r = lung_parts[rng.integers(2)]
        radii = base_r * rng.uniform(0.85, 1.15, size=3)
        offset = rng.uniform(-1, 1, size=3) * np.maximum(np.asarray(r) - radii, 0)
        blob = _ellipsoid(grid, np.asarray(c) + offset, radii)
        inside = blob & part
        if blob.sum() > 0 and inside.sum() >= 0.85 * blob.sum():
            lesion = inside
            break
    if lesion is None:
        raise GenerationError(f"{pid}: could not place a lesion inside the lungs after {max_tries} tries")

    sign = 1.0 if label == 1 else -1.0
    lung_level = 0.30 + rng.uniform(-0.5, 0.5) * params.context_spread
    ctx_amp = 0.04
    les_amp = 0.04
    les_level = lung_level + 0.25
    if params.signal_kind == "contrast":
        les_level += sign * 0.05 * params.signal
    elif params.signal_kind == "variance":
        ctx_amp = 0.04 * 2.0 ** (rng.uniform(-0.5, 0.5) * params.context_spread * 10)
        les_amp = ctx_amp * 2.0 ** (sign * params.signal)
    else:
        raise InvalidInputError(f"unknown signal_kind {params.signal_kind!r}")

    vol = np.full(grid, 0.08)
    vol[lungs] = lung_level + ctx_amp * _texture(rng, grid, params.texture_sigma)[lungs]
    vol[lesion] = les_level + les_amp * _texture(rng, grid, params.texture_sigma)[lesion]
    vol += params.noise * rng.standard_normal(grid)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    masks = [ViewMask(lungs, 1, "lung"), ViewMask(lesion, 2, "lesion")]
    return LabeledVolume(vol, int(label), masks, pid)


def generate_phantoms(
    n: int,
    class_balance: float = 0.27,
    grid=(64, 64, 32),
    rng_seed: int = 0,
    params: Optional[PhantomParams] = None,
) -> list:
    """Synthetic chest volumes with nested lung/lesion masks.

    Exactly ``round(n * class_balance)`` phantoms are positive. The class only
    changes the lesion interior, so a classifier has to look at the lesion.
    """
    if n < 2:
        raise InvalidInputError(f"need at least 2 phantoms, got {n}")
    if not 0 < class_balance < 1:
        raise InvalidInputError(f"class_balance must lie in (0, 1), got {class_balance}")
    params = params or PhantomParams()
    grid = tuple(int(g) for g in grid)
    n_pos = int(round(n * class_balance))
    seq = np.random.SeedSequence(rng_seed)
    label_rng, *case_seqs = [np.random.default_rng(s) for s in seq.spawn(n + 1)]
    labels = np.zeros(n, dtype=int)
    labels[:n_pos] = 1
    labels = label_rng.permutation(labels)
    return [
        make_phantom(int(y), grid, rng, params, pid=f"phantom-{i:04d}")
        for i, (y, rng) in enumerate(zip(labels, case_seqs))
    ]


def with_volume(v: LabeledVolume, volume: np.ndarray) -> LabeledVolume:
    return replace(v, volume=np.asarray(volume, dtype=np.float32))
