"""Tissue masks from random HU-intensity intervals, and the patch-mask baseline.

Random streams use numpy's PCG64 bit generator seeded through a
``SeedSequence`` built from ``(seed, epoch, image_index)``, so the mask for a
given image in a given epoch is reproducible and independent of batch order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .imaging import HU_MAX_DEFAULT, HU_MIN_DEFAULT, normalize_hu
from .validation import check_hu_batch, check_same_shape


class DegenerateMaskWarning(UserWarning):
    """The requested ratio rounds down to zero masked intervals or patches."""


def derive_rng(seed, image_index=0, epoch=0):
    """PCG64 generator for one (seed, epoch, image) triple."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(epoch), int(image_index)])
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class TissueMaskSpec:
    k_intervals: int = 8
    mask_ratio: float = 0.75
    rng_seed: int = 0
    hu_min: float = HU_MIN_DEFAULT
    hu_max: float = HU_MAX_DEFAULT

    def __post_init__(self):
        if int(self.k_intervals) < 1:
            raise ValueError(f"k_intervals must be >= 1, got {self.k_intervals}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")

    def sample(self, hu, image_index=0, epoch=0):
        rng = derive_rng(self.rng_seed, image_index, epoch)
        return build_tissue_mask(normalize_hu(hu, self.hu_min, self.hu_max), self, rng=rng)


@dataclass(frozen=True)
class PatchMaskSpec:
    patch_size: int = 16
    mask_ratio: float = 0.75
    rng_seed: int = 0

    def __post_init__(self):
        if int(self.patch_size) < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")

    def sample(self, hu, image_index=0, epoch=0):
        h, w = np.shape(hu)[-2:]
        return build_patch_mask(h, w, self, rng=derive_rng(self.rng_seed, image_index, epoch))


@dataclass
class TissueMask:
    """``bits`` is 1 where the pixel is kept and 0 where it is masked."""

    bits: np.ndarray
    masked_intervals: tuple = field(default_factory=tuple)

    @property
    def shape(self):
        return self.bits.shape

    @property
    def masked_fraction(self):
        return float(1.0 - self.bits.mean())


def partition_intervals(k):
    """K equal-width intervals covering [0, 1]; the last one is closed at 1."""
    k = int(k)
    if k < 1:
        raise ValueError(f"number of intervals must be >= 1, got {k}")
    edges = np.arange(k + 1) / k
    return [(float(edges[i]), float(edges[i + 1])) for i in range(k)]


def interval_index(norm, k):
    """Interval id of each normalized value under :func:`partition_intervals`."""
    interior = (np.arange(k + 1) / k)[1:-1]
    return np.searchsorted(interior, np.asarray(norm, dtype=np.float64), side="right")


def choose_masked_intervals(spec, rng=None):
    """floor(ratio * K) distinct interval ids, sampled without replacement."""
    rng = derive_rng(spec.rng_seed) if rng is None else rng
    count = math.floor(spec.mask_ratio * spec.k_intervals)
    if count == 0:
        warnings.warn(f"floor({spec.mask_ratio} * {spec.k_intervals}) = 0; nothing will be masked",
                      DegenerateMaskWarning, stacklevel=2)
        return ()
    return tuple(sorted(int(i) for i in rng.choice(spec.k_intervals, size=count, replace=False)))


def build_tissue_mask(norm, spec, rng=None, masked_intervals=None):
    """Zero every pixel whose normalized intensity lies in a chosen interval."""
    norm = np.asarray(norm, dtype=np.float64)
    if norm.size and (norm.min() < 0.0 or norm.max() > 1.0):
        raise ValueError("normalized image must lie in [0, 1]")
    if masked_intervals is None:
        masked_intervals = choose_masked_intervals(spec, rng)
    chosen = np.zeros(spec.k_intervals, dtype=bool)
    chosen[list(masked_intervals)] = True
    bits = (~chosen[interval_index(norm, spec.k_intervals)]).astype(np.uint8)
    return TissueMask(bits=bits, masked_intervals=tuple(masked_intervals))


def build_patch_mask(h, w, spec, rng=None):
    """Zero floor(ratio * n_patches) randomly chosen square patches."""
    p = int(spec.patch_size)
    if p > min(h, w):
        raise ValueError(f"patch_size {p} exceeds image side {min(h, w)}")
    rng = derive_rng(spec.rng_seed) if rng is None else rng
    rows, cols = -(-h // p), -(-w // p)
    count = math.floor(spec.mask_ratio * rows * cols)
    bits = np.ones((h, w), dtype=np.uint8)
    if count == 0:
        warnings.warn(f"floor({spec.mask_ratio} * {rows * cols}) = 0 patches; nothing will be masked",
                      DegenerateMaskWarning, stacklevel=2)
        return TissueMask(bits=bits)
    chosen = sorted(int(i) for i in rng.choice(rows * cols, size=count, replace=False))
    for idx in chosen:
        r, c = divmod(idx, cols)
        bits[r * p:(r + 1) * p, c * p:(c + 1) * p] = 0
    return TissueMask(bits=bits, masked_intervals=tuple(chosen))


def apply_mask(rgb, mask):
    """Multiply every channel by the mask bits (broadcast over the channel axis)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    bits = mask.bits if isinstance(mask, TissueMask) else np.asarray(mask)
    check_same_shape(rgb.shape[-2:], bits.shape[-2:], "image and mask")
    if bits.ndim == 3:
        bits = bits[:, None]
    return rgb * bits


class TissueMasker(TransformerMixin, BaseEstimator):
    """Map (n, H, W) HU slices to (n, H, W) keep-masks.

    Sample ``i`` uses the random stream ``(random_state, epoch, i)``; the chosen
    interval ids are stored in ``masked_intervals_`` after ``transform``.
    """

    def __init__(self, k_intervals=8, mask_ratio=0.75, random_state=0, epoch=0,
                 hu_min=HU_MIN_DEFAULT, hu_max=HU_MAX_DEFAULT):
        self.k_intervals = k_intervals
        self.mask_ratio = mask_ratio
        self.random_state = random_state
        self.epoch = epoch
        self.hu_min = hu_min
        self.hu_max = hu_max

    def _spec(self):
        return TissueMaskSpec(self.k_intervals, self.mask_ratio, self.random_state,
                              self.hu_min, self.hu_max)

    def fit(self, X, y=None):
        self._spec()
        check_hu_batch(X)
        return self

    def transform(self, X):
        X = check_hu_batch(X)
        spec = self._spec()
        masks = [spec.sample(x, i, self.epoch) for i, x in enumerate(X)]
        self.masked_intervals_ = [m.masked_intervals for m in masks]
        return np.stack([m.bits for m in masks])


class PatchMasker(TransformerMixin, BaseEstimator):
    """Patch-masking baseline with the same interface as :class:`TissueMasker`."""

    def __init__(self, patch_size=16, mask_ratio=0.75, random_state=0, epoch=0):
        self.patch_size = patch_size
        self.mask_ratio = mask_ratio
        self.random_state = random_state
        self.epoch = epoch

    def fit(self, X, y=None):
        check_hu_batch(X)
        return self

    def transform(self, X):
        X = check_hu_batch(X)
        spec = PatchMaskSpec(self.patch_size, self.mask_ratio, self.random_state)
        return np.stack([spec.sample(x, i, self.epoch).bits for i, x in enumerate(X)])
