"""Command-line entry point: ``tsrcan <command> [flags]``.

Commands
--------
gen-data     render a synthetic paired dataset with train/val/test splits
train        fit a model on a dataset directory
eval         score a checkpoint (or the baseline, or ground truth) on a split
baseline     score bicubic + CMF with white balance on a split
ablate-size  train one RCAN per residual-group count and tabulate the results
gradcheck    spot-check end-to-end gradients against finite differences
mask         build an occlusion keep-mask from a forward/backward flow pair

Every command prints its resolved configuration first.  Exit status is 0
only when all outputs were written and every reported number is finite.
"""

from __future__ import annotations

import argparse
import logging
import math
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as D
from . import io as msio
from . import model as M
from . import train as Tr
from .config import format_kv, load_preset
from .metrics import occlusion_mask
from .mosaic import DEFAULT_LAYOUT

log = logging.getLogger("tsrcan")


class CliError(Exception):
    """A user-facing error; printed without a traceback, exit status 2."""


def _print_config(command: str, values: dict) -> None:
    print(f"# {command}")
    print(format_kv(values), end="", flush=True)


def _model_config(preset: dict, args) -> M.ModelConfig:
    cfg = M.ModelConfig.from_mapping(preset)
    changes = {}
    for flag in ("groups", "arch", "mode", "fusion_init"):
        value = getattr(args, flag, None)
        if value is not None:
            changes[flag] = value
    return cfg.replace(**changes) if changes else cfg


def _train_config(preset: dict, args) -> Tr.TrainConfig:
    tcfg = Tr.TrainConfig.from_mapping(preset)
    changes = {}
    for flag, key in (("epochs", "epochs"), ("lr", "lr0"), ("batch_size", "batch_size"),
                      ("crop", "crop"), ("seed", "seed"), ("halve_every", "halve_every")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    return tcfg.replace(**changes) if changes else tcfg


def _load_split(root, split: str) -> list:
    root = Path(root)
    if not (root / "splits.txt").exists():
        raise CliError(f"{root} is not a dataset directory (no splits.txt)")
    ds = D.Dataset(root)
    if split not in ds.splits:
        raise CliError(f"unknown split {split!r}; have {sorted(ds.splits)}")
    samples = ds.split(split)
    if not samples:
        raise CliError(f"split {split!r} of {root} is empty")
    return samples


def _read_masks(mask_dir, samples) -> list:
    masks = []
    for s in samples:
        path = Path(mask_dir) / f"{s.id}.msrt"
        if not path.exists():
            raise CliError(f"no mask {path} for sample {s.id}")
        m = msio.read_msrt(path) > 0.5
        if m.shape != s.raw.shape:
            raise CliError(f"mask {path} is {m.shape}, sample is {s.raw.shape}")
        masks.append(m)
    return masks


def _write_report(report, out, method: str) -> bool:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    table = report.to_table(method)
    (out / "table.txt").write_text(table)
    print(table, end="")
    return all(math.isfinite(v) for row in report.per_image for v in row)


def _parse_groups(text: str) -> list:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in text.split(",") if t.strip()]


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    preset = load_preset(args.preset)
    count = args.count if args.count is not None else int(preset.get("count", 30))
    height = args.height if args.height is not None else int(preset.get("height", 32))
    width = args.width if args.width is not None else int(preset.get("width", 64))
    if height % 4 or width % 4:
        raise CliError(f"height and width must be multiples of 4, got {height}x{width}")
    out = Path(args.out)
    _print_config("gen-data", {"out": out, "count": count, "height": height, "width": width,
                               "seed": args.seed, "texture_amplitude": args.texture_amplitude,
                               "gain_jitter": args.gain_jitter})
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CliError(f"{out} is not empty; pass --force to overwrite")
        for child in out.iterdir():
            shutil.rmtree(child) if child.is_dir() else child.unlink()
    splits = D.generate_dataset(out, count, height, width, seed=args.seed,
                                texture_amplitude=args.texture_amplitude, gain_jitter=args.gain_jitter)
    print("split sizes: " + " ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return 0


def cmd_train(args) -> int:
    preset = load_preset(args.preset)
    cfg = _model_config(preset, args)
    tcfg = _train_config(preset, args)
    _print_config("train", {"data": args.data, "out": args.out, **asdict(cfg), **asdict(tcfg)})
    train = _load_split(args.data, "train")
    val = _load_split(args.data, "val")

    def report(row):
        print(f"epoch {row[0]} lr {row[1]:.3g} loss {row[2]:.6f} val_psnr {row[3]:.3f}", flush=True)

    result = Tr.fit(cfg, tcfg, train, val, out_dir=args.out, on_epoch=report if args.verbose else None)
    (Path(args.out) / "config.txt").write_text(cfg.to_text() + tcfg.to_text())
    print(f"best epoch {result.best_epoch} val_psnr {result.best_val_psnr:.3f} dB")
    print(f"checkpoint {Path(args.out) / 'best.ckpt'}")
    return 0 if math.isfinite(result.best_val_psnr) else 1


def cmd_eval(args) -> int:
    method = args.method
    if method == "model" and args.checkpoint is None:
        raise CliError("--checkpoint is required with --method model")
    settings = {"data": args.data, "split": args.split, "method": method, "out": args.out,
                "mask_dir": args.mask_dir}
    cfg = None
    if method == "model":
        params, cfg, _ = M.load_checkpoint(args.checkpoint)
        if args.mode is not None and args.mode != cfg.mode:
            raise CliError(f"--mode {args.mode} does not match the checkpoint's mode {cfg.mode}")
        settings.update(checkpoint=args.checkpoint, **asdict(cfg))
    _print_config("eval", settings)
    samples = _load_split(args.data, args.split)
    masks = _read_masks(args.mask_dir, samples) if args.mask_dir else None
    notes = []
    if method == "model":
        if cfg.in_channels != DEFAULT_LAYOUT.bands:
            raise CliError(f"checkpoint expects {cfg.in_channels} input channels, "
                           f"the mosaic has {DEFAULT_LAYOUT.bands} bands")
        preds = Tr.predict_samples(samples, params, cfg)
    elif method == "baseline":
        preds, notes = Tr.baseline_predictions(samples)
    else:
        preds = [s.hr_rgb for s in samples]
    report = Tr.evaluate_predictions(preds, samples, masks)
    report.notes = notes
    return 0 if _write_report(report, args.out, method) else 1


def cmd_baseline(args) -> int:
    args.method, args.checkpoint, args.mode = "baseline", None, None
    return cmd_eval(args)


def cmd_ablate_size(args) -> int:
    preset = load_preset(args.preset)
    base = _model_config(preset, args).replace(arch="rcan")
    tcfg = _train_config(preset, args)
    groups = _parse_groups(args.group_range)
    out = Path(args.out)
    data_root = Path(args.data) if args.data else out / "data"
    _print_config("ablate-size", {"out": out, "data": data_root, "group_range": args.group_range,
                                  **asdict(base), **asdict(tcfg)})
    if not args.data and not (data_root / "splits.txt").exists():
        D.generate_dataset(data_root, int(preset.get("count", 30)), int(preset.get("height", 32)),
                           int(preset.get("width", 64)), seed=tcfg.seed)
    train, val, test = (_load_split(data_root, s) for s in ("train", "val", "test"))

    def report(row):
        print("g={} params={} best_epoch={} val_psnr={:.3f} test_psnr={:.3f} test_ssim={:.4f}".format(*row),
              flush=True)

    rows = Tr.ablate_size(base, tcfg, train, val, test, groups, out_dir=out / "runs", log_fn=report)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(Tr.ablation_csv(rows))
    if args.plot:
        _plot_ablation(rows, out / "ablation.png")
    return 0 if all(math.isfinite(v) for r in rows for v in r[3:]) else 1


def _plot_ablation(rows, path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path)
        return
    g = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(g, [r[4] for r in rows], "o-")
    ax.set_xlabel("residual groups")
    ax.set_ylabel("test PSNR (dB)")
    ax.set_xticks(g)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_gradcheck(args) -> int:
    preset = load_preset(args.preset)
    # He-initialised fusion so every branch carries gradient at the check point.
    cfg = _model_config(preset, args).replace(fusion_init="he")
    _print_config("gradcheck", {"coords": args.coords, "seed": args.seed, "size": args.size,
                                "tolerance": args.tolerance, **asdict(cfg)})
    results = M.gradient_spot_check(cfg, coords=args.coords, seed=args.seed, size=args.size)
    worst = 0.0
    for r in results:
        worst = max(worst, r.rel_error)
        print(f"{r.name}{list(r.index)} analytic={r.analytic:.6e} numeric={r.numeric:.6e} rel={r.rel_error:.2e}")
    ok = worst < args.tolerance
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at {args.tolerance:g})")
    return 0 if ok else 1


def cmd_mask(args) -> int:
    _print_config("mask", {"forward": args.forward, "backward": args.backward,
                           "threshold_px": args.threshold, "out": args.out})
    fw, bw = msio.read_msrt(args.forward), msio.read_msrt(args.backward)
    keep = occlusion_mask(fw, bw, args.threshold)
    msio.write_msrt(args.out, keep.astype(np.float32))
    print(f"masked {100.0 * (1.0 - keep.mean()):.2f}% of {keep.size} pixels")
    return 0


# ----------------------------------------------------------------------------
# argument parsing


def _add_model_flags(p, groups: bool = True):
    p.add_argument("--preset", default="tiny", help="'tiny', 'full', or a key=value file")
    if groups:
        p.add_argument("--groups", type=int, default=None)
    p.add_argument("--arch", choices=M.ARCHS, default=None)
    p.add_argument("--mode", choices=M.MODES, default=None)
    p.add_argument("--fusion-init", dest="fusion_init", choices=M.FUSION_INITS, default=None)


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--crop", type=int, default=None, help="augmentation crop, 0 disables augmentation")
    p.add_argument("--halve-every", dest="halve_every", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsrcan", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="tiny")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texture-amplitude", dest="texture_amplitude", type=float, default=0.1)
    p.add_argument("--gain-jitter", dest="gain_jitter", type=float, default=0.0)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func in (("eval", cmd_eval), ("baseline", cmd_baseline)):
        p = sub.add_parser(name, help="score a checkpoint on a split" if name == "eval"
                           else "score bicubic + CMF on a split")
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--out", required=True)
        p.add_argument("--mask-dir", dest="mask_dir", default=None,
                       help="directory of <sample id>.msrt keep-masks")
        if name == "eval":
            p.add_argument("--checkpoint", default=None)
            p.add_argument("--mode", choices=M.MODES, default=None,
                           help="expected input regime; must match the checkpoint")
            p.add_argument("--method", choices=("model", "baseline", "identity"), default="model")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate-size", help="residual-group ablation")
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="dataset directory (generated from the preset if omitted)")
    p.add_argument("--plot", action="store_true", help="also write ablation.png (needs matplotlib)")
    p.add_argument("--groups", dest="group_range", default="3..7", help="range 'lo..hi' or list '3,5,7'")
    _add_model_flags(p, groups=False)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate_size)

    p = sub.add_parser("gradcheck", help="end-to-end gradient spot check")
    _add_model_flags(p)
    p.add_argument("--coords", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--tolerance", type=float, default=1e-2)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("mask", help="occlusion keep-mask from optical flows")
    p.add_argument("--forward", required=True, help="(2, H, W) MSRT flow, frame 1 -> 2")
    p.add_argument("--backward", required=True, help="(2, H, W) MSRT flow, frame 2 -> 1")
    p.add_argument("--threshold", type=float, default=3.0, help="round-trip error limit in pixels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError) as exc:
        print(f"tsrcan {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
