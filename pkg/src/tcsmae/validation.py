"""Input validation helpers shared by the estimators and functional API."""

from __future__ import annotations

import numpy as np

MIN_SIDE = 8


def check_hu_slice(hu, allow_batch=False):
    """Return ``hu`` as float64, rejecting non-finite pixels and tiny images."""
    arr = np.asarray(hu, dtype=np.float64)
    ndims = (2, 3) if allow_batch else (2,)
    if arr.ndim not in ndims:
        raise ValueError(f"expected a {' or '.join(f'{d}-D' for d in ndims)} HU array, got shape {arr.shape}")
    if arr.shape[-1] < MIN_SIDE or arr.shape[-2] < MIN_SIDE:
        raise ValueError(f"HU slice must be at least {MIN_SIDE}x{MIN_SIDE}, got {arr.shape[-2:]}")
    finite = np.isfinite(arr)
    if not finite.all():
        bad = tuple(int(i) for i in np.argwhere(~finite)[0])
        raise ValueError(f"non-finite HU value at pixel {bad}")
    return arr


def check_hu_batch(X):
    """Coerce ``X`` to an (n, H, W) float64 batch."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[0] == 0:
        raise ValueError(f"expected (n_samples, H, W) HU slices, got shape {X.shape}")
    return check_hu_slice(X, allow_batch=True)


def check_resolution(h, w, multiple=32):
    if h % multiple or w % multiple:
        raise ValueError(f"image size {h}x{w} must be divisible by {multiple}")


def check_labels(y, n_classes):
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("label maps must hold integer class indices")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"label outside class range [0, {n_classes - 1}]: "
                         f"found [{int(y.min())}, {int(y.max())}]")
    return y.astype(np.int64)


def check_same_shape(a, b, what="inputs"):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what} have different shapes: {np.shape(a)} vs {np.shape(b)}")
