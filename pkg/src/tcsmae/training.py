"""Semi-masked dual-branch pretraining and downstream finetuning.

Both branches run through one encoder/decoder: the masked and the original
batch are stacked along the batch axis, so they necessarily see the same
parameter objects. Their losses are summed and a single Adam step is taken
per batch.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import Adam, Tensor, load_checkpoint, ops, save_checkpoint
from .imaging import build_rgb
from .losses import ContrastParams, SsimParams, ce_dice_loss, contrastive_loss, per_sample_ssim, \
    ssim_loss, total_loss
from .masking import PatchMaskSpec, TissueMaskSpec, build_tissue_mask, choose_masked_intervals, \
    derive_rng
from .imaging import normalize_hu
from .metrics import MetricReport, dsc, hausdorff, multiclass_scores
from .model import ModelConfig, UNet, swap_head
from .validation import check_hu_batch, check_labels, check_resolution

log = logging.getLogger(__name__)

FULL_SCALE_FINETUNE_LR = 1e-6
LOSS_COLUMNS = ["step", "epoch", "lr", "L_ssim", "L_con", "L_total", "gamma"]


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    lr_decay: float = 0.96
    resolution: int = 64
    mask: str = "tissue"
    k_intervals: int = 8
    mask_ratio: float = 0.75
    patch_size: int = 16
    mask_resample: str = "image"
    scales: int = 2
    lam: float = 1.0
    temperature: float = 0.07
    ssim_mode: str = "sum"
    channels: tuple = (8, 16, 32, 64, 128)
    hflip: bool = False
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.epochs < 1:
            raise ValueError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        check_resolution(self.resolution, self.resolution)
        if self.mask not in ("tissue", "patch"):
            raise ValueError(f"mask: expected 'tissue' or 'patch', got {self.mask!r}")
        if self.mask_resample not in ("image", "batch"):
            raise ValueError("mask_resample: expected 'image' or 'batch'")
        if self.scales not in (0, 1, 2, 3):
            raise ValueError("scales: expected 0, 1, 2 or 3")
        if self.lam < 0:
            raise ValueError("lam: must be non-negative")
        if not self.lr > 0:
            raise ValueError("lr: must be positive")
        self.mask_spec()

    @classmethod
    def full_scale(cls, **overrides):
        """The full-scale schedule: 60 epochs, batch 30, 256x256."""
        return cls(**{"epochs": 60, "batch_size": 30, "resolution": 256, **overrides})

    def mask_spec(self):
        if self.mask == "tissue":
            return TissueMaskSpec(self.k_intervals, self.mask_ratio, self.seed)
        return PatchMaskSpec(self.patch_size, self.mask_ratio, self.seed)

    def model_config(self):
        return ModelConfig(channels=self.channels, resolution=self.resolution, head="recon",
                           scales=self.scales, seed=self.seed)

    def lr_at(self, epoch):
        return self.lr * self.lr_decay ** epoch

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    head: str = "binary"
    n_classes: int = 2
    init: str = "scratch"
    val_fraction: float = 0.2
    channels: tuple = (8, 16, 32, 64, 128)
    resolution: int = 64
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.epochs < 1:
            raise ValueError("epochs: must be >= 1")
        if self.head not in ("binary", "multiclass"):
            raise ValueError("head: expected 'binary' or 'multiclass'")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction: must lie in (0, 1)")
        if not self.lr > 0:
            raise ValueError("lr: must be positive")

    @property
    def n_out_classes(self):
        return 2 if self.head == "binary" else self.n_classes

    to_dict = PretrainConfig.to_dict
    from_dict = classmethod(PretrainConfig.from_dict.__func__)


# data helpers

def rgb_dataset(hu):
    """(n, H, W) HU -> (n, 3, H, W) RGB in [0, 1]."""
    return build_rgb(check_hu_batch(hu))


def epoch_order(n, seed, epoch):
    return np.random.default_rng([int(seed), int(epoch), 0x5EED]).permutation(n)


def make_masks(hu_batch, indices, cfg, epoch, batch_index):
    """Keep-masks for one batch under ``cfg.mask_resample``."""
    spec = cfg.mask_spec()
    if cfg.mask_resample == "image":
        return np.stack([spec.sample(hu_batch[j], int(i), epoch).bits
                         for j, i in enumerate(indices)])
    # one draw shared by the whole batch
    rng = derive_rng(cfg.seed, 10_000_000 + batch_index, epoch)
    if cfg.mask == "tissue":
        chosen = choose_masked_intervals(spec, rng)
        return np.stack([build_tissue_mask(normalize_hu(h), spec, masked_intervals=chosen).bits
                         for h in hu_batch])
    bits = spec.sample(hu_batch[0], 10_000_000 + batch_index, epoch).bits
    return np.repeat(bits[None], len(hu_batch), axis=0)


# pretraining

def dual_branch_losses(model, contrast, rgb, masks, cfg, ssim_params=SsimParams()):
    """Forward both branches; returns (L_ssim, L_con or None, L_total) tensors."""
    n = len(rgb)
    masked = rgb * masks[:, None]
    x = Tensor(np.concatenate([masked, rgb], axis=0))
    feats = model.encode(x)
    recon = model.decode(feats)
    target = rgb[:, :model.config.recon_channels]
    l_ssim = ssim_loss(ops.index(recon, slice(0, n)), ops.index(recon, slice(n, 2 * n)), target,
                       ssim_params, mode=cfg.ssim_mode)
    l_con = None
    if cfg.scales > 0:
        emb = model.project(feats)
        l_con = contrastive_loss([ops.index(e, slice(0, n)) for e in emb],
                                 [ops.index(e, slice(n, 2 * n)) for e in emb],
                                 contrast.log_temperature)
    return l_ssim, l_con, total_loss(l_ssim, l_con, cfg.lam)


def pretrain_parameters(model, contrast):
    params = dict(model.params)
    params[contrast.log_temperature.name] = contrast.log_temperature
    return params


def pretrain_step(model, contrast, optimizer, rgb, masks, cfg, step=0):
    """One forward/backward/Adam update on a batch; returns the loss record."""
    l_ssim, l_con, l_total = dual_branch_losses(model, contrast, rgb, masks, cfg)
    value = float(l_total.data)
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss at step {step}")
    optimizer.zero_grad()
    l_total.backward()
    optimizer.step()
    return {
        "L_ssim": float(l_ssim.data),
        "L_con": float(l_con.data) if l_con is not None else math.nan,
        "L_total": value,
        "gamma": contrast.temperature,
    }


@dataclass
class PretrainResult:
    model: UNet
    contrast: ContrastParams
    history: list = field(default_factory=list)

    def epoch_means(self, key="L_ssim"):
        epochs = sorted({r["epoch"] for r in self.history})
        return [float(np.mean([r[key] for r in self.history if r["epoch"] == e])) for e in epochs]


def pretrain(hu, cfg, out_dir=None, rgb=None, extra_config=None):
    """Pretrain on (n, H, W) HU slices; optionally write a run directory."""
    hu = check_hu_batch(hu)
    if hu.shape[1:] != (cfg.resolution, cfg.resolution):
        raise ValueError(f"slices are {hu.shape[1:]}, config resolution is {cfg.resolution}")
    rgb = rgb_dataset(hu) if rgb is None else rgb
    model = UNet(cfg.model_config())
    contrast = ContrastParams(cfg.temperature, cfg.lam)
    optimizer = Adam(pretrain_parameters(model, contrast), lr=cfg.lr)
    result = PretrainResult(model, contrast)
    step = 0
    for epoch in range(cfg.epochs):
        optimizer.lr = cfg.lr_at(epoch)
        order = epoch_order(len(hu), cfg.seed, epoch)
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = rgb[idx]
            masks = make_masks(hu[idx], idx, cfg, epoch, b)
            if cfg.hflip:
                flip = derive_rng(cfg.seed, 20_000_000 + b, epoch).random(len(idx)) < 0.5
                batch = np.where(flip[:, None, None, None], batch[..., ::-1], batch)
                masks = np.where(flip[:, None, None], masks[..., ::-1], masks)
            rec = pretrain_step(model, contrast, optimizer, batch, masks, cfg, step)
            rec.update(step=step, epoch=epoch, lr=optimizer.lr)
            result.history.append(rec)
            step += 1
        log.info("epoch %d: L_ssim=%.4f", epoch, result.epoch_means()[-1])
    if out_dir is not None:
        write_pretrain_run(result, cfg, out_dir, hu, extra_config)
    return result


def write_losses_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in history:
            w.writerow([r["step"], r["epoch"]] + [repr(float(r[k])) for k in LOSS_COLUMNS[2:]])


def content_hash(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def write_run_manifest(out, config, inputs_hash, outputs, started):
    manifest = {
        "config": config,
        "inputs_sha256": inputs_hash,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": sorted(outputs),
    }
    missing = [o for o in outputs if not (out / o).exists()]
    if missing:
        raise FileNotFoundError(f"run outputs missing: {', '.join(missing)}")
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_pretrain_run(result, cfg, out_dir, hu, extra_config=None):
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"kind": "pretrain", "model": result.model.config.to_dict()}
    save_checkpoint(pretrain_parameters(result.model, result.contrast), out / "checkpoint.bin",
                    out / "manifest.json", meta=meta)
    write_losses_csv(out / "losses.csv", result.history)
    resolved = {**cfg.to_dict(), **(extra_config or {})}
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    outputs = ["checkpoint.bin", "manifest.json", "losses.csv", "config.resolved.json"]
    write_run_manifest(out, resolved, content_hash(hu), outputs, started)


def load_pretrained(path):
    """Rebuild the reconstruction model (and temperature) from a checkpoint."""
    path = Path(path)
    bin_path = path / "checkpoint.bin" if path.is_dir() else path
    arrays, meta = load_checkpoint(bin_path)
    if "model" not in meta:
        raise ValueError(f"{bin_path}: manifest has no model configuration")
    model = UNet(ModelConfig.from_dict(meta["model"]))
    contrast = ContrastParams()
    temp = arrays.pop(contrast.log_temperature.name, None)
    if temp is not None:
        contrast.log_temperature.data[...] = temp
    model.load_state(arrays)
    return model, contrast


def reconstruct(model, rgb, target=None, batch_size=16, return_ssim=False):
    """Reconstructions of ``rgb`` (or per-sample SSIM against ``target``)."""
    target = rgb if target is None else target
    outs = []
    for s in range(0, len(rgb), batch_size):
        r = model.forward(Tensor(rgb[s:s + batch_size]))
        if return_ssim:
            t = target[s:s + batch_size, :model.config.recon_channels]
            outs.append(per_sample_ssim(r, t).data)
        else:
            outs.append(r.data)
    return np.concatenate(outs)


# finetuning

def split_train_val(n, val_fraction, seed):
    order = np.random.default_rng([int(seed), 0xF01D]).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def build_segmenter(cfg):
    """Segmentation model for ``cfg.init``: 'scratch' or a pretraining run/checkpoint."""
    if cfg.init == "scratch":
        return UNet(ModelConfig(channels=cfg.channels, resolution=cfg.resolution, head=cfg.head,
                                n_classes=cfg.n_out_classes, seed=cfg.seed))
    pretrained, _ = load_pretrained(cfg.init)
    if pretrained.config.channels != cfg.channels or pretrained.config.resolution != cfg.resolution:
        expected = UNet(ModelConfig(channels=cfg.channels, resolution=cfg.resolution,
                                    head=cfg.head, n_classes=cfg.n_out_classes))
        expected.load_trunk(pretrained.state_dict())  # raises with the offending names
    return swap_head(pretrained, cfg.head, n_classes=cfg.n_out_classes, seed=cfg.seed)


def predict_labels(model, rgb, batch_size=16):
    """Hard label maps: threshold 0.5 (binary) or argmax (multiclass)."""
    probs = []
    for s in range(0, len(rgb), batch_size):
        probs.append(model.forward(Tensor(rgb[s:s + batch_size])).data)
    p = np.concatenate(probs)
    if model.config.head == "multiclass":
        return p.argmax(axis=1), p
    return (p[:, 0] >= 0.5).astype(np.int64), p[:, 0]


def evaluate_model(model, rgb, labels, n_classes):
    pred, _ = predict_labels(model, rgb)
    report = MetricReport()
    per_class = []
    for p, g in zip(pred, labels):
        if n_classes == 2:
            report.add(dsc(p, g), hausdorff(p, g))
        else:
            ds, hs = multiclass_scores(p, g, n_classes)
            per_class.append(ds)
            defined = [h for h in hs if not math.isnan(h)]
            report.add(float(np.mean(ds)), float(np.mean(defined)) if defined else math.nan)
    return report, pred, (np.mean(per_class, axis=0) * 100.0 if per_class else None)


@dataclass
class FinetuneResult:
    model: UNet
    history: list = field(default_factory=list)
    val_index: np.ndarray = None

    @property
    def final_dsc(self):
        return self.history[-1]["val_dsc"]

    @property
    def mean_dsc(self):
        return float(np.mean([r["val_dsc"] for r in self.history]))


def finetune(hu, labels, cfg, out_dir=None, rgb=None, extra_config=None):
    """Train a segmentation head (and trunk) with CE + Dice; evaluate every epoch."""
    hu = check_hu_batch(hu)
    labels = check_labels(labels, cfg.n_out_classes)
    if labels.shape != hu.shape:
        raise ValueError(f"labels {labels.shape} do not match slices {hu.shape}")
    rgb = rgb_dataset(hu) if rgb is None else rgb
    model = build_segmenter(cfg)
    train_idx, val_idx = split_train_val(len(hu), cfg.val_fraction, cfg.seed)
    optimizer = Adam(model.params, lr=cfg.lr)
    result = FinetuneResult(model, val_index=val_idx)
    for epoch in range(cfg.epochs):
        order = train_idx[epoch_order(len(train_idx), cfg.seed, epoch)]
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = ce_dice_loss(model.decode_logits(model.encode(Tensor(rgb[idx]))), labels[idx])
            if not math.isfinite(float(loss.data)):
                raise NonFiniteLossError(f"non-finite finetune loss in epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.data))
        report, _, per_class = evaluate_model(model, rgb[val_idx], labels[val_idx], cfg.n_out_classes)
        s = report.summary()
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dsc": s["dsc_mean"],
               "val_dsc_std": s["dsc_std"], "val_hd": s["hd_mean"], "hd_undefined": s["hd_undefined"]}
        if per_class is not None:
            row.update({f"dsc_class_{c + 1}": float(v) for c, v in enumerate(per_class)})
        result.history.append(row)
        log.info("finetune epoch %d: loss=%.4f val DSC=%.2f", epoch, row["train_loss"], row["val_dsc"])
    if out_dir is not None:
        write_finetune_run(result, cfg, out_dir, hu, extra_config)
    return result


def write_rows_csv(path, rows):
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in cols])


def write_finetune_run(result, cfg, out_dir, hu, extra_config=None):
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"kind": "finetune", "model": result.model.config.to_dict()}
    save_checkpoint(result.model.params, out / "checkpoint.bin", out / "manifest.json", meta=meta)
    write_rows_csv(out / "metrics.csv", result.history)
    resolved = {**cfg.to_dict(), **(extra_config or {})}
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    outputs = ["checkpoint.bin", "manifest.json", "metrics.csv", "config.resolved.json"]
    write_run_manifest(out, resolved, content_hash(hu), outputs, started)


def load_segmenter(path):
    path = Path(path)
    arrays, meta = load_checkpoint(path / "checkpoint.bin" if path.is_dir() else path)
    model = UNet(ModelConfig.from_dict(meta["model"]))
    model.load_state(arrays)
    return model


# scikit-learn style estimators

class TCSMAEPretrainer(TransformerMixin, BaseEstimator):
    """Tissue-masked dual-branch autoencoder pretraining as an estimator.

    ``fit`` takes (n, H, W) HU slices. ``transform`` returns the projection
    embeddings of the unmasked inputs, concatenated over the configured
    levels (the flattened deepest pyramid level when no levels are set).
    """

    def __init__(self, epochs=20, batch_size=8, lr=1e-4, lr_decay=0.96, mask="tissue",
                 k_intervals=8, mask_ratio=0.75, patch_size=16, scales=2, lam=1.0,
                 temperature=0.07, channels=(8, 16, 32, 64, 128), random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.mask = mask
        self.k_intervals = k_intervals
        self.mask_ratio = mask_ratio
        self.patch_size = patch_size
        self.scales = scales
        self.lam = lam
        self.temperature = temperature
        self.channels = channels
        self.random_state = random_state

    def _config(self, resolution):
        return PretrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                              lr_decay=self.lr_decay, resolution=resolution, mask=self.mask,
                              k_intervals=self.k_intervals, mask_ratio=self.mask_ratio,
                              patch_size=self.patch_size, scales=self.scales, lam=self.lam,
                              temperature=self.temperature, channels=self.channels,
                              seed=self.random_state)

    def fit(self, X, y=None, out_dir=None):
        X = check_hu_batch(X)
        if X.shape[1] != X.shape[2]:
            raise ValueError("slices must be square")
        self.config_ = self._config(X.shape[1])
        res = pretrain(X, self.config_, out_dir=out_dir)
        self.model_, self.contrast_, self.history_ = res.model, res.contrast, res.history
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        rgb = rgb_dataset(X)
        out = []
        for s in range(0, len(rgb), 16):
            feats = self.model_.encode(Tensor(rgb[s:s + 16]))
            emb = self.model_.project(feats) or [ops.flatten(feats[-1])]
            out.append(np.concatenate([e.data for e in emb], axis=1))
        return np.concatenate(out)

    def reconstruct(self, X, masked=False):
        check_is_fitted(self, "model_")
        X = check_hu_batch(X)
        rgb = rgb_dataset(X)
        if masked:
            spec = self.config_.mask_spec()
            rgb = rgb * np.stack([spec.sample(h, i, 0).bits for i, h in enumerate(X)])[:, None]
        return reconstruct(self.model_, rgb)

    def score(self, X, y=None):
        """Mean reconstruction SSIM on unmasked inputs."""
        check_is_fitted(self, "model_")
        rgb = rgb_dataset(X)
        return float(reconstruct(self.model_, rgb, return_ssim=True).mean())

    def save(self, out_dir):
        check_is_fitted(self, "model_")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(pretrain_parameters(self.model_, self.contrast_), out / "checkpoint.bin",
                        out / "manifest.json", meta={"kind": "pretrain", "model": self.model_.config.to_dict()})
        return out


class LesionSegmenter(ClassifierMixin, BaseEstimator):
    """U-Net segmenter, optionally initialised from a pretraining checkpoint.

    ``init`` is ``"scratch"``, a checkpoint path / run directory, or a fitted
    :class:`TCSMAEPretrainer`.
    """

    def __init__(self, init="scratch", head="binary", n_classes=2, epochs=10, batch_size=8,
                 lr=1e-4, val_fraction=0.2, channels=(8, 16, 32, 64, 128), random_state=0):
        self.init = init
        self.head = head
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.val_fraction = val_fraction
        self.channels = channels
        self.random_state = random_state

    def fit(self, X, y, workdir=None):
        X = check_hu_batch(X)
        init = self.init
        if isinstance(init, TCSMAEPretrainer):
            if workdir is None:
                import tempfile
                workdir = tempfile.mkdtemp(prefix="tcsmae-")
            init = str(init.save(Path(workdir) / "pretrained"))
        cfg = FinetuneConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             head=self.head, n_classes=self.n_classes, init=str(init),
                             val_fraction=self.val_fraction, channels=self.channels,
                             resolution=X.shape[1], seed=self.random_state)
        res = finetune(X, y, cfg)
        self.model_, self.history_, self.val_index_ = res.model, res.history, res.val_index
        self.classes_ = np.arange(cfg.n_out_classes)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        _, p = predict_labels(self.model_, rgb_dataset(X))
        if self.model_.config.head == "binary":
            return np.stack([1.0 - p, p], axis=1)
        return p

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict_labels(self.model_, rgb_dataset(X))[0]

    def score(self, X, y):
        """Mean DSC (fraction) over samples."""
        pred = self.predict(X)
        if len(self.classes_) == 2:
            return float(np.mean([dsc(p, g) for p, g in zip(pred, y)]))
        return float(np.mean([np.mean(multiclass_scores(p, g, len(self.classes_))[0])
                              for p, g in zip(pred, y)]))
