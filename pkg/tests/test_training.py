import math

import numpy as np
import pytest

from tcsmae.autodiff import Adam, Tensor
from tcsmae.losses import ContrastParams
from tcsmae.metrics import recon_ssim_report
from tcsmae.model import UNet
from tcsmae.phantom import PhantomSpec, generate_batch
from tcsmae.training import (
    LOSS_COLUMNS, FinetuneConfig, LesionSegmenter, PretrainConfig, TCSMAEPretrainer,
    dual_branch_losses, finetune, load_pretrained, make_masks, pretrain, pretrain_parameters,
    pretrain_step, rgb_dataset, split_train_val,
)

CH = (4, 4, 8, 8, 8)


@pytest.fixture(scope="module")
def slices():
    hu, _ = generate_batch(PhantomSpec(resolution=32, seed=0), 8)
    return hu


def tiny(**kw):
    base = dict(epochs=1, batch_size=4, resolution=32, channels=CH, scales=2)
    return PretrainConfig(**{**base, **kw})


def test_lr_schedule():
    cfg = PretrainConfig(lr=3e-4)
    for e in range(60):
        assert cfg.lr_at(e) == pytest.approx(3e-4 * 0.96 ** e, rel=1e-12)


def test_lr_logged_per_epoch(slices):
    res = pretrain(slices, tiny(epochs=3, lr=1e-3))
    lrs = {r["epoch"]: r["lr"] for r in res.history}
    assert lrs == {e: pytest.approx(1e-3 * 0.96 ** e, rel=1e-12) for e in range(3)}


def test_config_validation():
    with pytest.raises(ValueError, match="unknown"):
        PretrainConfig.from_dict({"epochs": 1, "colour": 3})
    with pytest.raises(ValueError, match="scales"):
        PretrainConfig(scales=5)
    with pytest.raises(ValueError, match="epochs"):
        FinetuneConfig(epochs=0)
    full = PretrainConfig.full_scale()
    assert (full.epochs, full.batch_size, full.resolution) == (60, 30, 256)
    cfg = tiny(lam=0.5)
    assert PretrainConfig.from_dict(cfg.to_dict()) == cfg


def test_bookkeeping_one_batch(slices):
    res = pretrain(slices[:4], tiny())
    assert len(res.history) == 1
    assert set(LOSS_COLUMNS) <= set(res.history[0])


def test_deterministic_trajectories(slices):
    a = pretrain(slices, tiny(epochs=2))
    b = pretrain(slices, tiny(epochs=2))
    assert [r["L_total"] for r in a.history] == [r["L_total"] for r in b.history]
    assert a.model.trunk_checksum() == b.model.trunk_checksum()


def test_one_step_descends(slices):
    cfg = tiny(lr=1e-4)
    model, contrast = UNet(cfg.model_config()), ContrastParams()
    rgb = rgb_dataset(slices[:4])
    masks = make_masks(slices[:4], np.arange(4), cfg, 0, 0)
    before = float(dual_branch_losses(model, contrast, rgb, masks, cfg)[2].data)
    opt = Adam(pretrain_parameters(model, contrast), lr=cfg.lr)
    rec = pretrain_step(model, contrast, opt, rgb, masks, cfg)
    assert rec["L_total"] == pytest.approx(before, abs=0)
    after = float(dual_branch_losses(model, contrast, rgb, masks, cfg)[2].data)
    assert after < before


def test_scales_zero_has_no_contrastive_term(slices):
    cfg = tiny(scales=0)
    model, contrast = UNet(cfg.model_config()), ContrastParams()
    assert not any(n.startswith("mep.") for n in model.params)
    rgb = rgb_dataset(slices[:4])
    masks = make_masks(slices[:4], np.arange(4), cfg, 0, 0)
    l_ssim, l_con, l_total = dual_branch_losses(model, contrast, rgb, masks, cfg)
    assert l_con is None and l_total is l_ssim
    l_total.backward()
    assert float(contrast.log_temperature.grad) == 0.0
    res = pretrain(slices[:4], cfg)
    assert math.isnan(res.history[0]["L_con"])


def test_branches_share_parameters(slices):
    cfg = tiny()
    model, contrast = UNet(cfg.model_config()), ContrastParams()
    rgb = rgb_dataset(slices[:4])
    masks = make_masks(slices[:4], np.arange(4), cfg, 0, 0)
    l_ssim, _, _ = dual_branch_losses(model, contrast, rgb, masks, cfg)
    # the stacked pass equals two independent passes through the same weights
    from tcsmae.losses import ssim_loss
    rm = model.forward(Tensor(rgb * masks[:, None]))
    ro = model.forward(Tensor(rgb))
    assert float(l_ssim.data) == pytest.approx(float(ssim_loss(rm, ro, rgb[:, :2]).data), rel=1e-12)
    opt = Adam(pretrain_parameters(model, contrast), lr=1e-3)
    pretrain_step(model, contrast, opt, rgb, masks, cfg)
    assert all(opt.params[n] is model.params[n] for n in model.params)


def test_mask_resampling_modes(slices):
    per_image = make_masks(slices[:4], np.arange(4), tiny(), 0, 0)
    assert per_image.shape == (4, 32, 32)
    e1 = make_masks(slices[:4], np.arange(4), tiny(), 1, 0)
    assert not np.array_equal(per_image, e1)
    patch = make_masks(slices[:4], np.arange(4), tiny(mask="patch", patch_size=8, mask_resample="batch"), 0, 0)
    assert all(np.array_equal(patch[0], p) for p in patch)


def test_run_directory_and_checkpoint_roundtrip(slices, tmp_path):
    res = pretrain(slices[:4], tiny(), out_dir=tmp_path / "run")
    for name in ("checkpoint.bin", "manifest.json", "losses.csv", "config.resolved.json", "run.json"):
        assert (tmp_path / "run" / name).is_file()
    model, contrast = load_pretrained(tmp_path / "run")
    assert model.trunk_checksum() == res.model.trunk_checksum()
    from tcsmae.autodiff import save_checkpoint
    save_checkpoint(pretrain_parameters(model, contrast), tmp_path / "again.bin", tmp_path / "again.json",
                    meta={"kind": "pretrain", "model": model.config.to_dict()})
    assert (tmp_path / "again.bin").read_bytes() == (tmp_path / "run" / "checkpoint.bin").read_bytes()
    assert (tmp_path / "again.json").read_bytes() == (tmp_path / "run" / "manifest.json").read_bytes()


def test_recon_report_rows_and_determinism(slices, tmp_path):
    res = pretrain(slices[:4], tiny())
    spec = tiny().mask_spec()
    rows = recon_ssim_report(res.model, rgb_dataset(slices), slices, spec, path=tmp_path / "a.csv")
    recon_ssim_report(res.model, rgb_dataset(slices), slices, spec, path=tmp_path / "b.csv")
    assert len(rows) == 2 * len(slices)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_split_is_deterministic_80_20():
    tr, va = split_train_val(100, 0.2, 3)
    assert len(tr) == 80 and len(va) == 20
    assert not set(tr) & set(va)
    assert np.array_equal(split_train_val(100, 0.2, 3)[1], va)


def test_finetune_from_scratch_and_pretrained(tmp_path):
    hu, masks = generate_batch(PhantomSpec(resolution=32, seed=1, lesion_probability=1.0), 10)
    pre = pretrain(hu, tiny(), out_dir=tmp_path / "pre")
    base = dict(epochs=1, batch_size=4, channels=CH, resolution=32, lr=1e-3)
    scratch = finetune(hu, masks, FinetuneConfig(**base))
    warm = finetune(hu, masks, FinetuneConfig(init=str(tmp_path / "pre"), **base), out_dir=tmp_path / "ft")
    assert len(scratch.history) == len(warm.history) == 1
    assert (tmp_path / "ft" / "metrics.csv").is_file()
    # the pretrained run starts from the pretrained trunk (one step away from it)
    assert warm.model.trunk_checksum() != scratch.model.trunk_checksum()
    assert pre.model.params["encoder.1.down.weight"].shape == warm.model.params["encoder.1.down.weight"].shape
    with pytest.raises(ValueError, match="does not match"):
        finetune(hu, masks, FinetuneConfig(**{**base, "channels": (4, 4, 8, 8, 16)},
                                           init=str(tmp_path / "pre")))


def test_estimators(slices):
    est = TCSMAEPretrainer(epochs=1, batch_size=4, channels=CH, scales=1)
    assert est.get_params()["scales"] == 1
    est.fit(slices[:4])
    emb = est.transform(slices[:3])
    assert emb.shape == (3, 128)
    assert 0 <= est.score(slices[:2]) <= 1
    assert est.reconstruct(slices[:2], masked=True).shape == (2, 2, 32, 32)
    hu, masks = generate_batch(PhantomSpec(resolution=32, seed=2, lesion_probability=1.0), 6)
    seg = LesionSegmenter(init=est, epochs=1, batch_size=3, channels=CH, lr=1e-3).fit(hu, masks)
    assert seg.predict(hu).shape == (6, 32, 32)
    proba = seg.predict_proba(hu)
    assert proba.shape == (6, 2, 32, 32) and np.allclose(proba.sum(axis=1), 1.0)
    assert 0.0 <= seg.score(hu, masks) <= 1.0
