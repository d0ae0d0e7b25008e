"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line and the session summary repeats them.
The desk-scale pretraining run (criterion 6) is shared with criteria 7 and 8.
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from gradcases import LOSS_CASES, N_CASES, OP_CASES
from test_losses import infonce_oracle, ssim_oracle
from test_masking import mask_oracle
from test_metrics import dsc_oracle, hd_oracle, random_pairs
from tcsmae.autodiff import gradcheck
from tcsmae.cli import main
from tcsmae.losses import contrastive_loss, ssim
from tcsmae.masking import TissueMaskSpec, build_tissue_mask, choose_masked_intervals, derive_rng
from tcsmae.metrics import dsc, hausdorff, recon_ssim_report
from tcsmae.model import UNet
from tcsmae.phantom import PhantomSpec, generate_batch
from tcsmae.training import FinetuneConfig, PretrainConfig, finetune, pretrain, rgb_dataset


def test_criterion_01_gradcheck_suite(criterion):
    start = time.perf_counter()
    worst, failures = 0.0, []
    for name, build in {**OP_CASES, **LOSS_CASES}.items():
        for case in range(N_CASES):
            fn, tensors = build(np.random.default_rng([case, 101]))
            err = gradcheck(fn, tensors)
            worst = max(worst, err)
            if not err < 1e-4:
                failures.append((name, case, err))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    criterion(1, ok, f"{len(OP_CASES) + len(LOSS_CASES)} functions x {N_CASES} cases, "
                     f"worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert not failures, failures
    assert elapsed < 120


def test_criterion_02_masking_statistics(criterion):
    spec = TissueMaskSpec(8, 0.75, 2024)
    norm = np.random.default_rng(2024).uniform(0.0, 1.0, 10 ** 6)
    frac = build_tissue_mask(norm, spec, rng=derive_rng(2024)).masked_fraction
    mismatches = 0
    rng = np.random.default_rng(7)
    for i in range(100):
        img = rng.uniform(0.0, 1.0, (16, 16))
        chosen = choose_masked_intervals(spec, derive_rng(2024, i))
        bits = build_tissue_mask(img, spec, masked_intervals=chosen).bits
        mismatches += int(not np.array_equal(bits, mask_oracle(img, set(chosen), 8)))
    ok = abs(frac - 0.75) <= 0.02 and mismatches == 0
    criterion(2, ok, f"masked fraction {frac:.4f} on 1e6 pixels, {mismatches}/100 oracle mismatches")
    assert abs(frac - 0.75) <= 0.02
    assert mismatches == 0


def test_criterion_03_ssim_axioms(criterion):
    rng = np.random.default_rng(3)
    worst_id = worst_sym = worst_oracle = 0.0
    for _ in range(50):
        a = rng.uniform(0, 1, (16, 16))
        b = np.clip(a * rng.uniform(0, 1) + rng.uniform(0, 1, a.shape) * rng.uniform(0, 1), 0, 1)
        sab, sba = float(ssim(a, b).data), float(ssim(b, a).data)
        worst_id = max(worst_id, abs(float(ssim(a, a).data) - 1.0))
        worst_sym = max(worst_sym, abs(sab - sba))
        worst_oracle = max(worst_oracle, abs(sab - ssim_oracle(a, b)))
    ok = worst_id <= 1e-12 and worst_sym <= 1e-12 and worst_oracle <= 1e-10
    criterion(3, ok, f"identity {worst_id:.1e}, symmetry {worst_sym:.1e}, oracle {worst_oracle:.1e}")
    assert ok


def test_criterion_04_infonce_oracle(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for n in range(1, 5):
        for levels in (1, 2):
            for _ in range(3):
                pm = [rng.normal(size=(n, 8)) for _ in range(levels)]
                po = [rng.normal(size=(n, 8)) for _ in range(levels)]
                temp = float(rng.uniform(0.05, 1.0))
                got = float(contrastive_loss(pm, po, np.log(temp)).data)
                worst = max(worst, abs(got - infonce_oracle(pm, po, temp)))
    exact = []
    for n in range(1, 5):
        emb = np.repeat(rng.normal(size=(1, 8)), n, axis=0)
        exact.append(float(contrastive_loss([emb], [emb.copy()], np.log(0.07)).data) == math.log(2 * n - 1))
    ok = worst <= 1e-10 and all(exact)
    criterion(4, ok, f"oracle max abs diff {worst:.1e}, identical case exact for N=1..4: {all(exact)}")
    assert ok


def test_criterion_05_pipeline_determinism(tmp_path, criterion, capsys):
    assert main(["phantom", "gen", "--out", str(tmp_path / "ds"), "--n", "16", "--seed", "5"]) == 0
    for run in ("a", "b"):
        assert main(["pretrain", "--data", str(tmp_path / "ds"), "--epochs", "2", "--seed", "3",
                     "--out", str(tmp_path / run)]) == 0
    capsys.readouterr()
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("losses.csv", "checkpoint.bin", "manifest.json")}
    ok = all(same.values())
    criterion(5, ok, "byte-identical " + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok


# shared desk-scale pretraining run

DESK = PretrainConfig(epochs=20, batch_size=8, resolution=64, scales=2, k_intervals=8,
                      mask_ratio=0.75, seed=0)


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    hu, masks = generate_batch(PhantomSpec(resolution=64, seed=0, lesion_probability=0.0), 200)
    assert masks.sum() == 0
    out = tmp_path_factory.mktemp("desk") / "pretrain"
    start = time.perf_counter()
    result = pretrain(hu, DESK, out_dir=out)
    return result, out, time.perf_counter() - start


def test_criterion_06_pretraining_efficacy(desk_run, criterion):
    result, _, elapsed = desk_run
    means = result.epoch_means("L_ssim")
    ratio = means[-1] / means[0]
    ok = ratio <= 0.5 and elapsed < 30 * 60
    criterion(6, ok, f"L_ssim epoch 1 {means[0]:.4f} -> epoch {len(means)} {means[-1]:.4f} "
                     f"({100 * ratio:.1f}%), {elapsed:.0f}s")
    assert ratio <= 0.5
    assert elapsed < 30 * 60


def test_criterion_07_reconstruction_ordering(desk_run, criterion):
    result, _, _ = desk_run
    hu, _ = generate_batch(PhantomSpec(resolution=64, seed=1), 50)
    rgb = rgb_dataset(hu)
    spec = DESK.mask_spec()

    def means(model):
        rows = recon_ssim_report(model, rgb, hu, spec)
        return {c: float(np.mean([v for _, cc, v in rows if cc == c])) for c in ("masked", "unmasked")}

    trained = means(result.model)
    untrained = means(UNet(DESK.model_config()))
    ok = (trained["unmasked"] >= trained["masked"]
          and trained["masked"] - untrained["masked"] >= 0.1
          and trained["unmasked"] - untrained["unmasked"] >= 0.1)
    criterion(7, ok, f"trained unmasked {trained['unmasked']:.3f} >= masked {trained['masked']:.3f}; "
                     f"untrained {untrained['unmasked']:.3f}/{untrained['masked']:.3f}")
    assert ok


def test_criterion_08_transfer_ordering(desk_run, criterion):
    _, run_dir, _ = desk_run
    hu, masks = generate_batch(PhantomSpec(resolution=64, seed=7, lesion_probability=1.0), 100)
    rgb = rgb_dataset(hu)
    wins, detail = 0, []
    for seed in range(3):
        base = dict(epochs=10, batch_size=8, resolution=64, seed=seed)
        scratch = finetune(hu, masks, FinetuneConfig(init="scratch", **base), rgb=rgb).final_dsc
        warm = finetune(hu, masks, FinetuneConfig(init=str(run_dir), **base), rgb=rgb).final_dsc
        wins += warm >= scratch
        detail.append(f"seed {seed}: pretrained {warm:.1f} vs scratch {scratch:.1f}")
    ok = wins >= 2
    criterion(8, ok, f"{wins}/3 seeds pretrained >= scratch (val DSC %, epoch 10); " + "; ".join(detail))
    assert ok


def test_criterion_09_ablation_harness(tmp_path, criterion, capsys):
    ds = tmp_path / "ds"
    assert main(["phantom", "gen", "--out", str(ds), "--n", "16", "--seed", "9"]) == 0
    arms = {"patch": ["--mask", "patch", "--patch-size", "16", "--rho", "0.75"]}
    arms.update({f"scales{s}": ["--scales", str(s)] for s in range(4)})
    codes = {}
    for name, flags in arms.items():
        codes[name] = main(["pretrain", "--data", str(ds), "--epochs", "1", "--out", str(tmp_path / name)]
                           + flags)
    report = ["report", "--out", str(tmp_path / "report")]
    for name in arms:
        report += ["--run", str(tmp_path / name)]
    codes["report"] = main(report)
    capsys.readouterr()
    headers = {name: (tmp_path / name / "losses.csv").read_text().splitlines()[0] for name in arms}
    with open(tmp_path / "report" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    resolved = {name: json.loads((tmp_path / name / "config.resolved.json").read_text()) for name in arms}
    ok = (all(c == 0 for c in codes.values()) and len(set(headers.values())) == 1
          and len(rows) == len(arms) and all(r["final_L_ssim"] for r in rows)
          and resolved["patch"]["mask"] == "patch"
          and [resolved[f"scales{s}"]["scales"] for s in range(4)] == [0, 1, 2, 3])
    criterion(9, ok, f"arms {sorted(arms)} exit codes {sorted(set(codes.values()))}, "
                     f"{len(rows)} rows in summary.csv with shared columns")
    assert ok


def test_criterion_10_metric_oracles(criterion):
    dsc_bad = hd_bad = 0
    for p, g in random_pairs(200, seed=10):
        dsc_bad += dsc(p, g) != dsc_oracle(p, g)
        got, want = hausdorff(p, g), hd_oracle(p, g)
        hd_bad += not ((math.isnan(got) and math.isnan(want)) or got == want)
    empty = np.zeros((6, 6), bool)
    dot = empty.copy()
    dot[1, 1] = True
    conventions = (dsc(empty, empty) == 1.0 and dsc(dot, empty) == 0.0
                   and math.isnan(hausdorff(dot, empty)) and math.isnan(hausdorff(empty, empty)))
    ok = dsc_bad == 0 and hd_bad == 0 and conventions
    criterion(10, ok, f"dsc mismatches {dsc_bad}/200, hd mismatches {hd_bad}/200, "
                      f"degenerate conventions {conventions}")
    assert ok
