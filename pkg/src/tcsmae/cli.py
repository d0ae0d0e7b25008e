"""Command-line entry point: ``tcsmae <command> [options]``.

Every command writes into its ``--out`` directory and finishes with a
``run.json`` listing the resolved configuration, an input hash, timestamps and
the files it produced. Failures print one JSON line on stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint
from .imaging import build_rgb, read_volume, write_pgm, write_ppm
from .masking import PatchMaskSpec, TissueMaskSpec
from .metrics import evaluate_segmentation, recon_ssim_report, write_metrics_csv
from .model import ModelConfig, UNet
from .phantom import PhantomSpec, generate_dataset, load_dataset
from .training import (
    FULL_SCALE_FINETUNE_LR, FinetuneConfig, PretrainConfig, content_hash, finetune, load_pretrained,
    load_segmenter, predict_labels, pretrain, write_run_manifest,
)

log = logging.getLogger("tcsmae")

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_RUNTIME = 1


class CliError(Exception):
    def __init__(self, field, message, code=EXIT_USAGE):
        super().__init__(message)
        self.field = field
        self.code = code


class Parser(argparse.ArgumentParser):
    """argparse that reports usage errors as :class:`CliError` instead of exiting."""

    def error(self, message):
        raise CliError("argv", message)


_PRE = PretrainConfig()
_FT = FinetuneConfig()


def _clean(obj):
    """NaN/inf become null so every emitted file is strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _opt(parser, *names, default, help, **kw):
    # real default stays None so "given on the command line" is detectable
    parser.add_argument(*names, default=None, help=f"{help} (default: {default})", **kw)


def _add_common(p, config=True):
    p.add_argument("--out", metavar="DIR", required=True, help="output directory (required)")
    if config:
        p.add_argument("--config", metavar="PATH", help="JSON config; flags override it (default: none)")


def _add_seed(p, default=0):
    _opt(p, "--seed", type=int, metavar="N", default=default, help="random seed")


def _add_mask_flags(p):
    _opt(p, "--mask", choices=("tissue", "patch"), default=_PRE.mask, help="masking strategy")
    _opt(p, "--k", type=int, default=_PRE.k_intervals, help="number of HU intervals")
    _opt(p, "--rho", type=float, default=_PRE.mask_ratio, help="mask ratio")
    _opt(p, "--patch-size", type=int, default=_PRE.patch_size, help="patch side for --mask patch")


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = Parser(prog="tcsmae", description="Tissue-masked CT autoencoder pretraining toolkit.",
                    formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress (default: off)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    ph = sub.add_parser("phantom", help="synthetic dataset tools").add_subparsers(
        dest="action", required=True, parser_class=Parser)
    gen = ph.add_parser("gen", help="write a synthetic phantom dataset", formatter_class=fmt)
    _add_common(gen)
    _add_seed(gen)
    _opt(gen, "--n", type=int, default=200, help="number of slices")
    _opt(gen, "--start", type=int, default=0, help="index of the first slice")
    _opt(gen, "--resolution", type=int, default=64, help="slice side in pixels")
    _opt(gen, "--lesion-prob", type=float, default=0.0, help="probability that a slice has a lesion")
    gen.set_defaults(func=cmd_phantom_gen)

    mk = sub.add_parser("mask", help="masking tools").add_subparsers(
        dest="action", required=True, parser_class=Parser)
    prev = mk.add_parser("preview", help="render one mask as PGM + JSON", formatter_class=fmt)
    _add_common(prev, config=False)
    prev.add_argument("--in", dest="input", metavar="PATH", required=True,
                      help="HU volume (.raw with JSON sidecar) (required)")
    _opt(prev, "--slice", type=int, default=0, help="slice index inside the volume")
    _opt(prev, "--epoch", type=int, default=0, help="epoch used to derive the mask stream")
    _add_seed(prev)
    _add_mask_flags(prev)
    prev.set_defaults(func=cmd_mask_preview)

    pre = sub.add_parser("pretrain", help="dual-branch masked autoencoder pretraining",
                         formatter_class=fmt)
    _add_common(pre)
    _opt(pre, "--data", metavar="DIR", default="from config", help="dataset directory")
    _add_seed(pre, _PRE.seed)
    _add_mask_flags(pre)
    _opt(pre, "--scales", type=int, choices=(0, 1, 2, 3), default=_PRE.scales,
         help="number of pyramid levels with a contrastive projection")
    _opt(pre, "--lambda", dest="lam", type=float, default=_PRE.lam, help="contrastive loss weight")
    _opt(pre, "--epochs", type=int, default=_PRE.epochs, help="training epochs")
    _opt(pre, "--batch-size", type=int, default=_PRE.batch_size, help="batch size")
    _opt(pre, "--lr", type=float, default=_PRE.lr, help="initial learning rate")
    _opt(pre, "--resolution", type=int, default="dataset side", help="input side in pixels")
    pre.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="train a lesion segmenter", formatter_class=fmt)
    _add_common(ft)
    _opt(ft, "--data", metavar="DIR", default="from config", help="dataset directory with masks")
    _add_seed(ft, _FT.seed)
    _opt(ft, "--from", dest="init", metavar="{scratch,PATH}", default=_FT.init,
         help="'scratch' or a pretraining run directory / checkpoint.bin")
    _opt(ft, "--epochs", type=int, default=_FT.epochs, help="training epochs")
    _opt(ft, "--batch-size", type=int, default=_FT.batch_size, help="batch size")
    _opt(ft, "--lr", type=float, default=_FT.lr, help="learning rate")
    ft.add_argument("--full-scale-lr", action="store_true",
                    help=f"use the full-scale learning rate {FULL_SCALE_FINETUNE_LR:g} (default: off)")
    _opt(ft, "--head", choices=("binary", "multiclass"), default=_FT.head, help="output head")
    _opt(ft, "--n-classes", type=int, default=_FT.n_classes, help="classes for a multiclass head")
    _opt(ft, "--resolution", type=int, default="dataset side", help="input side in pixels")
    ft.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("eval", help="score a checkpoint on a dataset", formatter_class=fmt)
    _add_common(ev, config=False)
    ev.add_argument("--checkpoint", metavar="PATH", required=True,
                    help="run directory or checkpoint.bin (required)")
    ev.add_argument("--data", metavar="DIR", required=True, help="dataset directory (required)")
    _add_seed(ev)
    _add_mask_flags(ev)
    ev.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", help="training curves and run comparison", formatter_class=fmt)
    _add_common(rep, config=False)
    rep.add_argument("--run", metavar="DIR", action="append", required=True,
                     help="pretrain or finetune run directory; repeat to compare (required)")
    rep.add_argument("--ppm", action="store_true", help="also draw curves as PPM images (default: off)")
    rep.set_defaults(func=cmd_report)

    md = sub.add_parser("model", help="model tools").add_subparsers(
        dest="action", required=True, parser_class=Parser)
    desc = md.add_parser("describe", help="print the layer/shape table", formatter_class=fmt)
    desc.add_argument("--checkpoint", metavar="PATH", help="describe a saved model (default: none)")
    _opt(desc, "--resolution", type=int, default=64, help="input side in pixels")
    _opt(desc, "--scales", type=int, choices=(0, 1, 2, 3), default=2, help="projection levels")
    _opt(desc, "--head", choices=("recon", "binary", "multiclass"), default="recon", help="output head")
    _opt(desc, "--n-classes", type=int, default=2, help="classes for a multiclass head")
    desc.set_defaults(func=cmd_model_describe)
    return parser


# helpers

def _read_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError("--config", f"config file not found: {p}", EXIT_IO)
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError("--config", f"invalid JSON in {p}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError("--config", "config must be a JSON object")
    return cfg


def _overrides(args, mapping):
    return {field: getattr(args, attr) for attr, field in mapping.items()
            if getattr(args, attr, None) is not None}


def _build_config(cls, base, overrides):
    merged = {**base, **overrides}
    try:
        return cls.from_dict(merged)
    except TypeError as exc:
        raise CliError("config", str(exc)) from exc
    except ValueError as exc:
        field = str(exc).split(":", 1)[0] if ":" in str(exc) else "config"
        raise CliError(field, str(exc)) from exc


def _load_data(path, need_masks=False):
    if path is None:
        raise CliError("--data", "no dataset given (flag or 'data' in config)")
    p = Path(path)
    if not (p / "dataset.json").is_file():
        raise CliError("--data", f"dataset manifest not found: {p / 'dataset.json'}", EXIT_IO)
    hu, masks, manifest = load_dataset(p)
    if need_masks and masks is None:
        raise CliError("--data", f"dataset {p} has no masks")
    return hu, masks, manifest


def _mask_spec(args, seed):
    k = args.k if args.k is not None else _PRE.k_intervals
    rho = args.rho if args.rho is not None else _PRE.mask_ratio
    try:
        if (args.mask or _PRE.mask) == "patch":
            ps = args.patch_size if args.patch_size is not None else _PRE.patch_size
            return PatchMaskSpec(ps, rho, seed)
        return TissueMaskSpec(k, rho, seed)
    except ValueError as exc:
        raise CliError("--rho" if "ratio" in str(exc) else "--k", str(exc)) from exc


def _pick(value, default):
    return default if value is None else value


# commands

def cmd_phantom_gen(args):
    started = _now()
    base = _read_config(args.config)
    over = {"seed": args.seed, "resolution": args.resolution, "lesion_probability": args.lesion_prob}
    spec = _build_config(PhantomSpec, base.get("phantom", base),
                         {k: v for k, v in over.items() if v is not None})
    n, start = _pick(args.n, 200), _pick(args.start, 0)
    if n < 1:
        raise CliError("--n", "must be >= 1")
    out = generate_dataset(spec, n, args.out, start=start)
    manifest = json.loads((out / "dataset.json").read_text())
    outputs = ["dataset.json"] + [it[k] for it in manifest["items"] for k in ("volume", "mask")]
    write_run_manifest(out, {"phantom": spec.to_dict(), "n": n, "start": start},
                       content_hash(np.frombuffer((out / "dataset.json").read_bytes(), np.uint8)),
                       outputs, started)
    return {"out": str(out), "n": n}


def cmd_mask_preview(args):
    started = _now()
    src = Path(args.input)
    if not src.is_file():
        raise CliError("--in", f"volume not found: {src}", EXIT_IO)
    vol, _ = read_volume(src)
    idx = _pick(args.slice, 0)
    if not 0 <= idx < len(vol):
        raise CliError("--slice", f"slice {idx} out of range for {len(vol)} slice(s)")
    seed, epoch = _pick(args.seed, 0), _pick(args.epoch, 0)
    spec = _mask_spec(args, seed)
    mask = spec.sample(vol[idx], idx, epoch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "mask.pgm", mask.bits * 255)
    write_ppm(out / "masked.ppm", build_rgb(vol[idx]) * mask.bits * 255)
    record = {"seed": seed, "mask": "patch" if isinstance(spec, PatchMaskSpec) else "tissue",
              "rho": spec.mask_ratio, "masked_intervals": list(mask.masked_intervals),
              "masked_fraction": mask.masked_fraction}
    if isinstance(spec, TissueMaskSpec):
        record["K"] = spec.k_intervals
    else:
        record["patch_size"] = spec.patch_size
    (out / "mask.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out, {"input": str(src.resolve()), "slice": idx, "epoch": epoch, **record},
                       content_hash(vol), ["mask.pgm", "masked.ppm", "mask.json"], started)
    return record


PRETRAIN_FLAGS = {"seed": "seed", "mask": "mask", "k": "k_intervals", "rho": "mask_ratio",
                  "patch_size": "patch_size", "scales": "scales", "lam": "lam", "epochs": "epochs",
                  "batch_size": "batch_size", "lr": "lr", "resolution": "resolution"}


def cmd_pretrain(args):
    base = _read_config(args.config)
    data = args.data or base.pop("data", None)
    base.pop("data", None)
    hu, _, _ = _load_data(data)
    base.setdefault("resolution", int(hu.shape[-1]))
    cfg = _build_config(PretrainConfig, base, _overrides(args, PRETRAIN_FLAGS))
    if hu.shape[1:] != (cfg.resolution, cfg.resolution):
        raise CliError("resolution", f"dataset slices are {hu.shape[1:]}, resolution is {cfg.resolution}")
    res = pretrain(hu, cfg, out_dir=args.out, extra_config={"data": str(Path(data).resolve())})
    ssim = res.epoch_means("L_ssim")
    return {"out": args.out, "epochs": cfg.epochs, "L_ssim_first": ssim[0], "L_ssim_last": ssim[-1]}


FINETUNE_FLAGS = {"seed": "seed", "init": "init", "epochs": "epochs", "batch_size": "batch_size",
                  "lr": "lr", "head": "head", "n_classes": "n_classes", "resolution": "resolution"}


def cmd_finetune(args):
    base = _read_config(args.config)
    data = args.data or base.pop("data", None)
    base.pop("data", None)
    hu, masks, _ = _load_data(data, need_masks=True)
    base.setdefault("resolution", int(hu.shape[-1]))
    over = _overrides(args, FINETUNE_FLAGS)
    if args.full_scale_lr:
        if args.lr is not None:
            raise CliError("--full-scale-lr", "--full-scale-lr and --lr are mutually exclusive")
        over["lr"] = FULL_SCALE_FINETUNE_LR
    init = over.get("init", base.get("init", "scratch"))
    if init != "scratch":
        p = Path(init)
        if not (p.is_file() or (p / "checkpoint.bin").is_file()):
            raise CliError("--from", f"checkpoint not found: {p}", EXIT_IO)
        over["init"] = str(p.resolve())
    cfg = _build_config(FinetuneConfig, base, over)
    res = finetune(hu, masks, cfg, out_dir=args.out,
                   extra_config={"data": str(Path(data).resolve())})
    return {"out": args.out, "final_val_dsc": res.final_dsc, "mean_val_dsc": res.mean_dsc}


def cmd_eval(args):
    started = _now()
    ckpt = Path(args.checkpoint)
    bin_path = ckpt / "checkpoint.bin" if ckpt.is_dir() else ckpt
    if not bin_path.is_file():
        raise CliError("--checkpoint", f"checkpoint not found: {bin_path}", EXIT_IO)
    _, meta = load_checkpoint(bin_path)
    hu, masks, _ = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = ["summary.json"]
    if meta.get("kind") == "pretrain":
        model, _ = load_pretrained(bin_path)
        spec = _mask_spec(args, _pick(args.seed, 0))
        rows = recon_ssim_report(model, build_rgb(hu), hu, spec, path=out / "recon_ssim.csv")
        outputs.append("recon_ssim.csv")
        summary = {"kind": "reconstruction", "n": len(hu)}
        for cond in ("masked", "unmasked"):
            vals = [v for _, c, v in rows if c == cond]
            summary[f"ssim_{cond}_mean"] = float(np.mean(vals))
            summary[f"ssim_{cond}_std"] = float(np.std(vals))
    else:
        if masks is None:
            raise CliError("--data", "segmentation eval needs a dataset with masks")
        model = load_segmenter(bin_path)
        pred, _ = predict_labels(model, build_rgb(hu))
        n_classes = 2 if model.config.head == "binary" else model.config.n_classes
        report = evaluate_segmentation(pred, masks, n_classes)
        write_metrics_csv(out / "metrics.csv", report)
        outputs.append("metrics.csv")
        summary = {"kind": "segmentation", **report.summary()}
    (out / "summary.json").write_text(
        json.dumps(_clean(summary), indent=2, sort_keys=True, allow_nan=False) + "\n")
    write_run_manifest(out, {"checkpoint": str(bin_path.resolve()), "data": str(Path(args.data).resolve())},
                       content_hash(hu), outputs, started)
    return summary


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _epoch_curves(rows, keys):
    epochs = sorted({int(r["epoch"]) for r in rows})
    out = []
    for e in epochs:
        sel = [r for r in rows if int(r["epoch"]) == e]
        out.append({"epoch": e, **{k: float(np.mean([float(r[k]) for r in sel])) for k in keys}})
    return out


def _plot_ppm(path, curves, keys, width=320, height=160):
    """Line plot, one colour per series, each series scaled to its own range."""
    colours = [(200, 30, 30), (30, 90, 200), (30, 150, 60), (150, 60, 170), (220, 140, 0)]
    img = np.full((height, width, 3), 255, dtype=np.uint8)
    img[[0, -1], :] = 0
    img[:, [0, -1]] = 0
    n = len(curves)
    for ki, key in enumerate(keys):
        y = np.array([c[key] for c in curves], dtype=float)
        if not np.isfinite(y).any():
            continue
        lo, hi = np.nanmin(y), np.nanmax(y)
        ys = (y - lo) / (hi - lo) if hi > lo else np.full_like(y, 0.5)
        xs = np.linspace(4, width - 5, max(n, 2))[:n]
        for i in range(n - 1):
            if not (np.isfinite(ys[i]) and np.isfinite(ys[i + 1])):
                continue
            for t in np.linspace(0.0, 1.0, 64):
                px = int(round(xs[i] + t * (xs[i + 1] - xs[i])))
                py = int(round((height - 5) - (ys[i] + t * (ys[i + 1] - ys[i])) * (height - 10)))
                img[py, px] = colours[ki % len(colours)]
    write_ppm(path, img)


def cmd_report(args):
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs, summary_rows, hashes = [], [], []
    for i, run in enumerate(args.run):
        run = Path(run)
        name = f"{i:02d}_{run.name}"
        if (run / "losses.csv").is_file():
            rows = _read_csv(run / "losses.csv")
            keys = ["L_ssim", "L_con", "L_total", "lr", "gamma"]
            final_keys = ["L_ssim", "L_con", "L_total"]
        elif (run / "metrics.csv").is_file():
            rows = _read_csv(run / "metrics.csv")
            keys = [k for k in rows[0] if k != "epoch"]
            final_keys = ["val_dsc", "val_hd", "train_loss"]
        else:
            raise CliError("--run", f"no losses.csv or metrics.csv in {run}", EXIT_IO)
        cfg_path = run / "config.resolved.json"
        cfg = json.loads(cfg_path.read_text()) if cfg_path.is_file() else {}
        curves = _epoch_curves(rows, keys)
        with open(out / f"{name}_curves.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch"] + keys)
            for c in curves:
                w.writerow([c["epoch"]] + [repr(c[k]) for k in keys])
        outputs.append(f"{name}_curves.csv")
        if args.ppm:
            _plot_ppm(out / f"{name}_curves.ppm", curves, final_keys)
            outputs.append(f"{name}_curves.ppm")
        row = {"run": str(run), "mask": cfg.get("mask", ""), "scales": cfg.get("scales", ""),
               "init": cfg.get("init", ""), "epochs": len(curves)}
        row.update({f"final_{k}": curves[-1][k] for k in final_keys})
        summary_rows.append(row)
        source = run / ("losses.csv" if (run / "losses.csv").is_file() else "metrics.csv")
        hashes.append(source.read_bytes())
    cols = []
    for r in summary_rows:
        cols += [c for c in r if c not in cols]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in summary_rows:
            w.writerow([repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "") for c in cols])
    outputs.append("summary.csv")
    write_run_manifest(out, {"runs": [str(Path(r).resolve()) for r in args.run], "ppm": args.ppm},
                       content_hash(*(np.frombuffer(h, np.uint8) for h in hashes)),
                       outputs, started)
    return {"out": str(out), "runs": len(args.run)}


def cmd_model_describe(args):
    if args.checkpoint:
        p = Path(args.checkpoint)
        bin_path = p / "checkpoint.bin" if p.is_dir() else p
        if not bin_path.is_file():
            raise CliError("--checkpoint", f"checkpoint not found: {bin_path}", EXIT_IO)
        _, meta = load_checkpoint(bin_path)
        cfg = ModelConfig.from_dict(meta["model"])
    else:
        head = _pick(args.head, "recon")
        cfg = _build_config(ModelConfig, {}, {
            "resolution": _pick(args.resolution, 64), "scales": _pick(args.scales, 2), "head": head,
            "n_classes": _pick(args.n_classes, 2)})
    model = UNet(cfg)
    rows = model.describe()
    width = max(len(n) for n, _, _ in rows)
    lines = [f"{'name':<{width}}  {'shape':<20}  size"]
    lines += [f"{n:<{width}}  {str(s):<20}  {k}" for n, s, k in rows]
    lines.append(f"total parameters: {model.n_parameters()}")
    print("\n".join(lines))
    return None


def _limit_threads():
    n = os.environ.get("TCSMAE_THREADS")
    if not n:
        return None
    try:
        n = int(n)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError("TCSMAE_THREADS", f"must be a positive integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        limiter = _limit_threads()
        try:
            result = args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except CliError as exc:
        _fail(exc.field, str(exc), exc.code)
        return exc.code
    except FileNotFoundError as exc:
        _fail("path", str(exc), EXIT_IO)
        return EXIT_IO
    except (ValueError, FloatingPointError) as exc:
        _fail(type(exc).__name__, str(exc), EXIT_RUNTIME)
        return EXIT_RUNTIME
    if result is not None:
        print(json.dumps(_clean(result), sort_keys=True, allow_nan=False))
    return 0


def _fail(field, message, code):
    line = json.dumps({"error": " ".join(message.split()), "field": field, "code": code},
                      sort_keys=True)
    print(line, file=sys.stderr)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
