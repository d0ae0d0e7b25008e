"""Segmentation metrics and the masked/unmasked reconstruction report."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .validation import check_same_shape


def dsc(pred, gt):
    """Dice overlap 2|P & G| / (|P| + |G|); both empty counts as 1, one empty as 0."""
    check_same_shape(pred, gt, "prediction and ground truth")
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary(mask):
    """Foreground pixels with a 4-neighbour outside the foreground.

    Pixels beyond the image border count as background.
    """
    m = np.pad(np.asarray(mask).astype(bool), 1)
    core = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return core & ~interior


def hausdorff(pred, gt):
    """Symmetric Hausdorff distance (pixels) between the two boundaries.

    Returns NaN when either mask is empty.
    """
    check_same_shape(pred, gt, "prediction and ground truth")
    a = np.argwhere(boundary(pred))
    b = np.argwhere(boundary(gt))
    if len(a) == 0 or len(b) == 0:
        return math.nan
    d = cdist(a, b)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def multiclass_scores(pred, gt, n_classes):
    """Per-foreground-class (dsc, hd) lists for integer label maps."""
    dscs, hds = [], []
    for c in range(1, n_classes):
        dscs.append(dsc(pred == c, gt == c))
        hds.append(hausdorff(pred == c, gt == c))
    return dscs, hds


@dataclass
class MetricReport:
    """Per-sample DSC (percent) and HD (pixels) with aggregates.

    Undefined Hausdorff values (an empty mask) are excluded from the HD
    aggregate and counted in ``hd_undefined``.
    """

    dsc: list = field(default_factory=list)
    hd: list = field(default_factory=list)

    def add(self, dsc_fraction, hd_pixels):
        self.dsc.append(100.0 * dsc_fraction)
        self.hd.append(hd_pixels)

    @property
    def hd_undefined(self):
        return int(sum(math.isnan(h) for h in self.hd))

    def summary(self):
        d = np.asarray(self.dsc, dtype=float)
        h = np.asarray([x for x in self.hd if not math.isnan(x)], dtype=float)
        return {
            "n": len(self.dsc),
            "dsc_mean": float(d.mean()) if d.size else math.nan,
            "dsc_std": float(d.std()) if d.size else math.nan,
            "hd_mean": float(h.mean()) if h.size else math.nan,
            "hd_std": float(h.std()) if h.size else math.nan,
            "hd_undefined": self.hd_undefined,
        }


def aggregate(values):
    """Mean and (population) standard deviation across folds or seeds."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std())


def evaluate_segmentation(preds, gts, n_classes=2):
    """MetricReport over paired label maps; multiclass is macro-averaged."""
    report = MetricReport()
    for p, g in zip(preds, gts):
        if n_classes == 2:
            report.add(dsc(p, g), hausdorff(p, g))
        else:
            ds, hs = multiclass_scores(np.asarray(p), np.asarray(g), n_classes)
            defined = [h for h in hs if not math.isnan(h)]
            report.add(float(np.mean(ds)), float(np.mean(defined)) if defined else math.nan)
    return report


def write_metrics_csv(path, report, ids=None):
    ids = range(len(report.dsc)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "dsc", "hd"])
        for sid, d, h in zip(ids, report.dsc, report.hd):
            w.writerow([sid, repr(float(d)), "nan" if math.isnan(h) else repr(float(h))])


def recon_ssim_report(model, rgb, hu, mask_spec, path=None, ids=None, batch_size=16):
    """SSIM of reconstructions from masked and unmasked inputs, per sample.

    Returns a list of ``(sample, condition, ssim)`` rows; with ``path`` also
    writes them as CSV. Sample ``i`` is masked with stream ``(seed, 0, i)``.
    """
    from .training import reconstruct  # avoid an import cycle

    masks = np.stack([mask_spec.sample(h, i, 0).bits for i, h in enumerate(hu)])
    ids = list(range(len(rgb))) if ids is None else list(ids)
    s_orig = reconstruct(model, rgb, batch_size=batch_size, return_ssim=True)
    s_mask = reconstruct(model, rgb * masks[:, None], target=rgb, batch_size=batch_size,
                         return_ssim=True)
    rows = []
    for i, sid in enumerate(ids):
        rows.append((sid, "masked", float(s_mask[i])))
        rows.append((sid, "unmasked", float(s_orig[i])))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "condition", "ssim"])
            for sid, cond, val in rows:
                w.writerow([sid, cond, repr(val)])
    return rows
