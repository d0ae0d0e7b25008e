"""Differentiable training objectives.

SSIM here uses whole-image statistics (one mean, variance and covariance per
plane) rather than a sliding Gaussian window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import as_tensor

TAU1 = 0.01 ** 2
TAU2 = 0.03 ** 2


@dataclass(frozen=True)
class SsimParams:
    tau1: float = TAU1
    tau2: float = TAU2

    def __post_init__(self):
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ValueError("SSIM stabilizers must be positive")


class ContrastParams:
    """Learnable temperature (stored as its log) and the contrastive weight."""

    def __init__(self, temperature=0.07, weight=1.0):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        if weight < 0:
            raise ValueError("contrastive weight must be non-negative")
        self.log_temperature = Tensor(np.log(temperature), requires_grad=True,
                                      name="contrast.log_temperature")
        self.weight = float(weight)

    @property
    def temperature(self):
        return float(np.exp(self.log_temperature.data))


def ssim(a, b, params=SsimParams()):
    """Global SSIM between planes; leading axes are treated as a batch.

    Returns one value per leading index (a scalar for 2-D input).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    axes = (-2, -1)
    mu_a = ops.mean(a, axis=axes, keepdims=True)
    mu_b = ops.mean(b, axis=axes, keepdims=True)
    da, db = a - mu_a, b - mu_b
    var_a = ops.mean(ops.square(da), axis=axes)
    var_b = ops.mean(ops.square(db), axis=axes)
    cov = ops.mean(da * db, axis=axes)
    mu_a, mu_b = ops.reshape(mu_a, var_a.shape), ops.reshape(mu_b, var_b.shape)
    lum = (2.0 * mu_a * mu_b + params.tau1) / (ops.square(mu_a) + ops.square(mu_b) + params.tau1)
    struct = (2.0 * cov + params.tau2) / (var_a + var_b + params.tau2)
    return lum * struct


def per_sample_ssim(recon, target, params=SsimParams()):
    """(N,) SSIM averaged over channels of (N, C, H, W) planes."""
    return ops.mean(ssim(recon, target, params), axis=1)


def ssim_loss(recon_masked, recon_orig, target, params=SsimParams(), mode="sum"):
    """Reconstruction loss over both branches.

    ``mode="sum"`` averages (1 - SSIM_m) + (1 - SSIM_o) over the batch;
    ``mode="ratio"`` evaluates (1 - SSIM_m) / (1 - SSIM_o) instead, for
    comparison only.
    """
    recon_masked, recon_orig, target = as_tensor(recon_masked), as_tensor(recon_orig), as_tensor(target)
    if not recon_masked.shape == recon_orig.shape == target.shape:
        raise ValueError(f"ssim_loss: shapes {recon_masked.shape}, {recon_orig.shape}, {target.shape}")
    term_m = 1.0 - per_sample_ssim(recon_masked, target, params)
    term_o = 1.0 - per_sample_ssim(recon_orig, target, params)
    if mode == "sum":
        return ops.mean(term_m + term_o)
    if mode == "ratio":
        return ops.mean(term_m / term_o)
    raise ValueError(f"unknown ssim loss mode {mode!r}")


def contrastive_loss(emb_masked, emb_orig, log_temperature):
    """InfoNCE with masked-branch anchors, summed over levels, averaged over samples.

    ``emb_masked`` and ``emb_orig`` are lists (one entry per pyramid level) of
    (N, D) embeddings. For anchor n the candidates are all 2N embeddings of that
    level except the anchor itself; the positive is the original-branch view of
    the same sample.
    """
    if len(emb_masked) != len(emb_orig):
        raise ValueError("both branches must provide the same levels")
    if not emb_masked:
        return None
    inv_t = ops.exp(ops.mul(as_tensor(log_temperature), -1.0))
    total = None
    for pm, po in zip(emb_masked, emb_orig):
        pm, po = as_tensor(pm), as_tensor(po)
        if pm.shape != po.shape or pm.ndim != 2:
            raise ValueError(f"contrastive_loss: embedding shapes {pm.shape} vs {po.shape}")
        n = pm.shape[0]
        um = ops.l2_normalize(pm, axis=1)
        pool = ops.concat([um, ops.l2_normalize(po, axis=1)], axis=0)
        sims = ops.matmul(um, ops.transpose(pool))  # (N, 2N)
        keep = np.ones((n, 2 * n), dtype=bool)
        keep[np.arange(n), np.arange(n)] = False
        cand = ops.reshape(ops.index(sims, keep), (n, 2 * n - 1))
        pos = ops.index(sims, (np.arange(n), n + np.arange(n)))
        logits = (cand - ops.reshape(pos, (n, 1))) * inv_t
        per_anchor = ops.logsumexp(logits, axis=1)
        # average around a detached reference value: same value and gradient as a
        # plain mean, but identical rows come back bit-exact
        ref = float(per_anchor.data[0])
        level = ops.mean(per_anchor - ref) + ref
        total = level if total is None else total + level
    return total


def total_loss(recon_term, contrast_term, weight=1.0):
    if contrast_term is None or weight == 0:
        return recon_term
    return recon_term + weight * contrast_term


def ce_dice_loss(logits, labels, eps=1e-6):
    """Cross entropy plus soft Dice, equally weighted.

    One logit channel means binary (sigmoid) segmentation with labels in
    {0, 1}; C > 1 channels means softmax over C classes with Dice averaged
    over the foreground classes 1..C-1. Sums for Dice run over the whole batch.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n, c = logits.shape[:2]
    if labels.shape != (n,) + logits.shape[2:]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    n_classes = 2 if c == 1 else c
    if labels.min() < 0 or labels.max() >= n_classes or np.any(labels != np.round(labels)):
        raise ValueError(f"label outside class range [0, {n_classes - 1}]")
    labels = labels.astype(np.int64)
    if c == 1:
        z = ops.reshape(logits, labels.shape)
        y = labels.astype(np.float64)
        ce = ops.mean(ops.softplus(z) - z * y)
        p = ops.sigmoid(z)
        dice = 1.0 - 2.0 * ops.sum(p * y) / (ops.sum(p) + float(y.sum()) + eps)
        return ce + dice
    logp = ops.log_softmax(logits, axis=1)
    onehot = np.moveaxis(np.eye(c)[labels], -1, 1)
    ce = ops.mul(ops.sum(logp * onehot), -1.0 / (labels.size))
    prob = ops.softmax(logits, axis=1)
    axes = (0, 2, 3) if logits.ndim == 4 else tuple(i for i in range(logits.ndim) if i != 1)
    inter = ops.sum(prob * onehot, axis=axes)
    denom = ops.sum(prob, axis=axes) + onehot.sum(axis=axes) + eps
    per_class = 1.0 - 2.0 * inter / denom
    dice = ops.mean(ops.index(per_class, slice(1, None)))
    return ce + dice
