"""Synthetic chest-like CT slices with exact ground-truth masks.

A slice is painted as a tissue label map (body, lungs, bone, vessels and an
optional lesion) and then filled with per-tissue Gaussian HU noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imaging import read_volume, sidecar_path, write_volume

AIR, SOFT, LUNG, BONE, LESION = 0, 1, 2, 3, 4
TISSUE_NAMES = ("air", "soft_tissue", "lung", "bone", "lesion")

DEFAULT_PALETTE = {
    "air": (-1000.0, 10.0),
    "lung": (-800.0, 40.0),
    "soft_tissue": (40.0, 20.0),
    "bone": (400.0, 60.0),
    "lesion": (-50.0, 60.0),
}


@dataclass(frozen=True)
class PhantomSpec:
    resolution: int = 64
    seed: int = 0
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    center_jitter: float = 0.04
    axis_jitter: float = 0.06
    lesion_probability: float = 0.0
    lesion_radius: tuple = (0.12, 0.25)
    vessel_count: tuple = (3, 8)

    def __post_init__(self):
        if self.resolution % 32 or self.resolution < 32:
            raise ValueError(f"resolution must be a positive multiple of 32, got {self.resolution}")
        for name, (mean, sd) in self.palette.items():
            if sd < 0:
                raise ValueError(f"palette {name!r}: negative sigma")
            if not -1024 <= mean <= 1000:
                raise ValueError(f"palette {name!r}: mean {mean} outside [-1024, 1000]")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ValueError("lesion_probability must lie in [0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["palette"] = {k: list(v) for k, v in self.palette.items()}
        d["lesion_radius"] = list(self.lesion_radius)
        d["vessel_count"] = list(self.vessel_count)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "palette" in d:
            d["palette"] = {k: tuple(v) for k, v in d["palette"].items()}
        for key in ("lesion_radius", "vessel_count"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _grid(res):
    c = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="ij")  # (y, x)


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    ca, sa = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def paint_labels(spec, index):
    """Tissue label map for slice ``index`` plus the lesion mask."""
    rng = np.random.default_rng([int(spec.seed), int(index)])
    yy, xx = _grid(spec.resolution)
    jit = lambda s: rng.uniform(-s, s)  # noqa: E731

    labels = np.full((spec.resolution,) * 2, AIR, dtype=np.uint8)
    by, bx = jit(spec.center_jitter), jit(spec.center_jitter)
    bry, brx = 0.66 + jit(spec.axis_jitter), 0.88 + jit(spec.axis_jitter)
    body = _ellipse(yy, xx, by, bx, bry, brx)
    labels[body] = SOFT

    # rib arc: a thin shell just inside the body outline, lateral/posterior part only
    shell = body & ~_ellipse(yy, xx, by, bx, bry * 0.88, brx * 0.9)
    theta = np.arctan2(yy - by, xx - bx)
    labels[shell & (np.abs(np.sin(theta)) < 0.85)] = BONE
    # vertebra analogue below the lungs
    labels[_ellipse(yy, xx, by + 0.45 * bry / 0.66, bx, 0.11, 0.11)] = BONE

    lungs = []
    for side in (-1.0, 1.0):
        cy = by - 0.05 + jit(spec.center_jitter)
        cx = bx + side * (0.40 + jit(spec.center_jitter))
        ry, rx = 0.40 + jit(spec.axis_jitter), 0.27 + jit(spec.axis_jitter / 2)
        lung = _ellipse(yy, xx, cy, cx, ry, rx, angle=side * jit(0.15))
        labels[lung] = LUNG
        lungs.append((cy, cx, ry, rx, lung))

    lo, hi = spec.vessel_count
    for _ in range(int(rng.integers(lo, hi + 1))):
        cy, cx, ry, rx, lung = lungs[int(rng.integers(2))]
        r, a = np.sqrt(rng.uniform(0, 0.7)), rng.uniform(0, 2 * np.pi)
        vy, vx = cy + r * ry * np.sin(a), cx + r * rx * np.cos(a)
        rad = rng.uniform(0.025, 0.05)
        labels[_ellipse(yy, xx, vy, vx, rad, rad) & lung] = SOFT

    lesion = np.zeros_like(labels, dtype=bool)
    if rng.uniform() < spec.lesion_probability:
        cy, cx, ry, rx, _ = lungs[int(rng.integers(2))]
        r, a = np.sqrt(rng.uniform(0, 0.3)), rng.uniform(0, 2 * np.pi)
        ly, lx = cy + r * ry * np.sin(a), cx + r * rx * np.cos(a)
        r_lo, r_hi = spec.lesion_radius
        lesion = _ellipse(yy, xx, ly, lx, rng.uniform(r_lo, r_hi), rng.uniform(r_lo, r_hi),
                          angle=rng.uniform(0, np.pi))
        labels[lesion] = LESION
    return labels, lesion


def clean_slice(spec, labels):
    """Noise-free HU image: every pixel at its tissue's palette mean."""
    means = np.array([spec.palette[name][0] for name in TISSUE_NAMES])
    return means[labels]


def generate_slice(spec, index):
    """Return ``(hu, lesion_mask)`` for slice ``index``; deterministic in (seed, index)."""
    labels, lesion = paint_labels(spec, index)
    noise_rng = np.random.default_rng([int(spec.seed), int(index), 1])
    sds = np.array([spec.palette[name][1] for name in TISSUE_NAMES])
    hu = clean_slice(spec, labels) + sds[labels] * noise_rng.standard_normal(labels.shape)
    return np.clip(hu, -1024.0, 3071.0), lesion.astype(np.uint8)


def generate_batch(spec, n, start=0):
    """In-memory ``(hu (n,H,W), masks (n,H,W))``."""
    pairs = [generate_slice(spec, start + i) for i in range(n)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def write_mask(path, mask, n_classes=2):
    path = Path(path)
    m = np.asarray(mask, dtype=np.uint8)
    if m.ndim == 2:
        m = m[None]
    path.write_bytes(m.tobytes(order="C"))
    meta = {"height": int(m.shape[1]), "width": int(m.shape[2]), "slices": int(m.shape[0]),
            "dtype": "uint8", "classes": int(n_classes)}
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_mask(path):
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    raw = path.read_bytes()
    shape = (meta["slices"], meta["height"], meta["width"])
    if len(raw) != shape[0] * shape[1] * shape[2]:
        raise ValueError(f"{path}: size does not match its sidecar")
    return np.frombuffer(raw, dtype=np.uint8).reshape(shape).copy(), meta


def generate_dataset(spec, n, out_dir, start=0):
    """Write ``n`` single-slice volumes, their masks, and ``dataset.json``."""
    if n < 1:
        raise ValueError("dataset needs at least one slice")
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(start, start + n):
        hu, mask = generate_slice(spec, i)
        vol = Path("volumes") / f"slice_{i:05d}.raw"
        msk = Path("masks") / f"slice_{i:05d}.raw"
        write_volume(out / vol, hu)
        write_mask(out / msk, mask)
        items.append({"index": i, "volume": vol.as_posix(), "mask": msk.as_posix()})
    manifest = {"format": "tcsmae-dataset/1", "n": n, "spec": spec.to_dict(), "items": items}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path):
    """Return ``(hu (n,H,W), masks (n,H,W) or None, manifest)``."""
    path = Path(path)
    manifest_path = path / "dataset.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    hus, masks = [], []
    for item in manifest["items"]:
        vol, _ = read_volume(path / item["volume"])
        hus.append(vol)
        if item.get("mask"):
            masks.append(read_mask(path / item["mask"])[0])
    hu = np.concatenate(hus)
    mk = np.concatenate(masks) if len(masks) == len(hus) else None
    return hu, mk, manifest
