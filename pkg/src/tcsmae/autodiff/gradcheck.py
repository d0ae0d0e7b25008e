"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np


def numerical_grad(fn, tensor, h=1e-3, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor.data``.

    ``indices`` restricts the probe to a subset of flat positions; entries not
    probed are left as NaN.
    """
    flat = tensor.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(tensor.shape)


def relative_error(analytic, numeric):
    """max |a - n| / max(max |a|, max |n|), over the probed entries."""
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def gradcheck(fn, tensors, h=1e-3, max_entries=None, rng=None):
    """Compare backward gradients of ``fn()`` against finite differences.

    Returns the worst relative error over all ``tensors``. With
    ``max_entries`` only a random subset of each tensor is probed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in tensors:
        t.zero_grad()
    fn().backward()
    worst = 0.0
    for t in tensors:
        idx = None
        if max_entries is not None and t.data.size > max_entries:
            idx = rng.choice(t.data.size, size=max_entries, replace=False)
        numeric = numerical_grad(fn, t, h=h, indices=idx)
        worst = max(worst, relative_error(t.grad, numeric))
    return worst
