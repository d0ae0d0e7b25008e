"""HU slices to the three-channel (lung, mediastinal, edge) representation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_hu_batch, check_hu_slice

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

# largest gradient magnitude the kernels above can produce on a [0, 255] image
EDGE_MAX = 4.0 * np.sqrt(2.0) * 255.0

HU_MIN_DEFAULT = -1000.0
HU_MAX_DEFAULT = 500.0


@dataclass(frozen=True)
class WindowSpec:
    level: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")


LUNG_WINDOW = WindowSpec(level=-500.0, width=1200.0)
MEDIASTINAL_WINDOW = WindowSpec(level=30.0, width=300.0)


def normalize_hu(hu, hu_min=HU_MIN_DEFAULT, hu_max=HU_MAX_DEFAULT):
    """Affine map of HU onto [0, 1] with clamping."""
    if not hu_min < hu_max:
        raise ValueError(f"hu_min ({hu_min}) must be below hu_max ({hu_max})")
    hu = check_hu_slice(hu, allow_batch=True)
    return np.clip((hu - hu_min) / (hu_max - hu_min), 0.0, 1.0)


def apply_window(hu, window):
    """Window/level transform to a gray image in [0, 255]."""
    hu = check_hu_slice(hu, allow_batch=True)
    return np.clip((hu - window.level + 0.5 * window.width) / window.width * 255.0, 0.0, 255.0)


def convolve3x3(image, kernel):
    """Replicate-padded 3x3 filter, applied as cross-correlation.

    Flipping the Sobel kernels only flips the sign of each gradient component,
    so the magnitude is the same under either convention.
    """
    image = np.asarray(image, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    pad = [(0, 0)] * (image.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(image, pad, mode="edge")
    h, w = image.shape[-2:]
    out = np.zeros_like(image)
    for di in range(3):
        for dj in range(3):
            if k[di, dj]:
                out += k[di, dj] * p[..., di:di + h, dj:dj + w]
    return out


def sobel_gradients(gray):
    return convolve3x3(gray, SOBEL_X), convolve3x3(gray, SOBEL_Y)


def sobel_magnitude(gray):
    """Raw Sobel gradient magnitude (not rescaled)."""
    gx, gy = sobel_gradients(gray)
    return np.sqrt(gx * gx + gy * gy)


def sobel_edge(gray):
    """Sobel magnitude rescaled back into [0, 255]."""
    return np.clip(sobel_magnitude(gray) / EDGE_MAX * 255.0, 0.0, 255.0)


def combine_edges(edge_lung, edge_medi):
    edge_lung = np.asarray(edge_lung, dtype=np.float64)
    edge_medi = np.asarray(edge_medi, dtype=np.float64)
    if edge_lung.shape != edge_medi.shape:
        raise ValueError(f"edge shapes differ: {edge_lung.shape} vs {edge_medi.shape}")
    return np.maximum(edge_lung, edge_medi)


def build_rgb(hu, lung=LUNG_WINDOW, mediastinal=MEDIASTINAL_WINDOW):
    """(lung, mediastinal, edge) planes in [0, 1].

    Accepts a single (H, W) slice or an (N, H, W) batch; the channel axis is
    inserted just before H.
    """
    hu = check_hu_slice(hu, allow_batch=True)
    lung_gray = apply_window(hu, lung)
    medi_gray = apply_window(hu, mediastinal)
    edge = combine_edges(sobel_edge(lung_gray), sobel_edge(medi_gray))
    return np.stack([lung_gray, medi_gray, edge], axis=-3) / 255.0


class RgbTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer: (n, H, W) HU slices -> (n, 3, H, W) RGB planes."""

    def __init__(self, lung_level=-500.0, lung_width=1200.0, medi_level=30.0, medi_width=300.0):
        self.lung_level = lung_level
        self.lung_width = lung_width
        self.medi_level = medi_level
        self.medi_width = medi_width

    def fit(self, X, y=None):
        check_hu_batch(X)
        return self

    def transform(self, X):
        X = check_hu_batch(X)
        return build_rgb(X, WindowSpec(self.lung_level, self.lung_width),
                         WindowSpec(self.medi_level, self.medi_width))


# raw volume + JSON sidecar I/O

def sidecar_path(raw_path):
    return Path(raw_path).with_suffix(".json")


def write_volume(raw_path, hu, spacing_mm=(1.0, 1.0, 1.0)):
    """Write an (S, H, W) or (H, W) HU array as little-endian int16 + JSON sidecar."""
    hu = np.asarray(hu)
    if hu.ndim == 2:
        hu = hu[None]
    raw_path = Path(raw_path)
    data = np.clip(np.rint(hu), -32768, 32767).astype("<i2")
    raw_path.write_bytes(data.tobytes(order="C"))
    meta = {"height": int(hu.shape[1]), "width": int(hu.shape[2]), "slices": int(hu.shape[0]),
            "spacing_mm": [float(s) for s in spacing_mm]}
    sidecar_path(raw_path).write_text(json.dumps(meta, sort_keys=True) + "\n")
    return raw_path


def read_volume(raw_path):
    """Return ``(volume (S, H, W) float64, sidecar dict)``."""
    raw_path = Path(raw_path)
    side = sidecar_path(raw_path)
    if not raw_path.is_file():
        raise FileNotFoundError(f"volume not found: {raw_path}")
    if not side.is_file():
        raise FileNotFoundError(f"volume sidecar not found: {side}")
    meta = json.loads(side.read_text())
    for key in ("height", "width", "slices"):
        if key not in meta:
            raise ValueError(f"{side}: missing field {key!r}")
    shape = (meta["slices"], meta["height"], meta["width"])
    raw = raw_path.read_bytes()
    expected = 2 * shape[0] * shape[1] * shape[2]
    if len(raw) != expected:
        raise ValueError(f"{raw_path}: {len(raw)} bytes, sidecar implies {expected}")
    return np.frombuffer(raw, dtype="<i2").reshape(shape).astype(np.float64), meta


def _to_u8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64)), 0, 255).astype(np.uint8)


def write_pgm(path, gray):
    """8-bit binary PGM from values in [0, 255]."""
    g = _to_u8(gray)
    header = f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + g.tobytes())


def write_ppm(path, rgb):
    """8-bit binary PPM from a (3, H, W) or (H, W, 3) array in [0, 255]."""
    rgb = np.asarray(rgb)
    if rgb.shape[0] == 3 and rgb.ndim == 3 and rgb.shape[-1] != 3:
        rgb = rgb.transpose(1, 2, 0)
    img = _to_u8(rgb)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def read_pnm(path):
    """Read a binary PGM/PPM written by :func:`write_pgm`/:func:`write_ppm`."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    magic, dims, maxval, body = parts
    w, h = (int(v) for v in dims.split())
    if int(maxval) != 255:
        raise ValueError("only 8-bit PNM supported")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w) if magic == b"P5" else arr.reshape(h, w, 3)
