"""``mfdnet`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .blocks import ConfigError
from .data import (IngestionError, dataset_iter, read_image, to_image, to_tensor,
                   write_png, write_procedural_assets)
from .evalkit import RESOLUTIONS, MetricsReport, bench_inference, count_macs, count_params, mac_breakdown
from .model import (CheckpointFormatError, CheckpointVersionError, atomic_write, build_model,
                    load_checkpoint, restore, save_checkpoint)
from .pyramid import DimensionError
from .train import evaluate, load_pairs, train

log = logging.getLogger("mfdnet")


class UsageError(Exception):
    pass


def _model_from_args(args, settings):
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)
    return build_model(settings.model(), seed=args.seed)


def cmd_assets(args):
    write_procedural_assets(args.out, n_bases=args.n_bases, n_flares=args.n_flares, size=args.size,
                            seed=args.seed)
    print(f"wrote procedural assets to {args.out}")


def cmd_synth(args):
    settings = cfgmod.resolve(args)
    dcfg = settings.data()
    dcfg.epoch_length = args.count
    out = Path(args.out)
    samples = list(dataset_iter(args.bases, args.flares, dcfg, seed=args.seed))
    (out / "corrupted").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    lines = [f"seed = {args.seed}", f"count = {args.count}", f"patch = {dcfg.patch}"]
    for i, s in enumerate(samples):
        name = f"{i:04d}.png"
        write_png(out / "corrupted" / name, s.corrupted)
        write_png(out / "gt" / name, s.gt)
        a = s.augment
        lines.append(
            f"{name} gamma={s.gamma!r} base={s.base} flare={s.flare} rotation={a.rotation!r} "
            f"translate=({a.translate_x!r},{a.translate_y!r}) shear={a.shear!r} scale={a.scale!r} "
            f"hflip={a.hflip} vflip={a.vflip}"
        )
    atomic_write(out / "manifest.txt", ("\n".join(lines) + "\n").encode())
    print(f"wrote {len(samples)} pairs to {out}")


def cmd_init(args):
    settings = cfgmod.resolve(args)
    model = build_model(settings.model(), seed=args.seed)
    save_checkpoint(model, args.out)
    print(f"initialized model ({count_params(model)} params) -> {args.out}")


def _training_pairs(args, settings):
    if args.pairs:
        return [(read_image(c), read_image(g)) for _, c, g in load_pairs(args.pairs)]
    if not (args.bases and args.flares):
        raise UsageError("train needs either --pairs DIR or both --bases and --flares")
    return [(s.corrupted, s.gt) for s in dataset_iter(args.bases, args.flares, settings.data(), seed=args.seed)]


def cmd_train(args):
    settings = cfgmod.resolve(args)
    if args.resume:
        model = load_checkpoint(Path(args.out) / "last.ckpt")
    else:
        model = _model_from_args(args, settings)
    tc = settings.train(args.seed)
    pairs = _training_pairs(args, settings)
    eval_pairs = [(read_image(c), read_image(g)) for _, c, g in load_pairs(args.eval)] if args.eval else None
    result = train(model, pairs, tc, out_dir=args.out, eval_pairs=eval_pairs, resume=args.resume)
    if result.history:
        first, last = result.history[0]["total"], result.history[-1]["total"]
        print(f"trained {len(result.history)} steps: loss {first:.6f} -> {last:.6f}")
    print(f"checkpoint: {result.last_checkpoint}")


def _write_report(report, prefix):
    if prefix:
        atomic_write(f"{prefix}.txt", report.table().encode())
        atomic_write(f"{prefix}.kv", report.key_values().encode())


def cmd_eval(args):
    settings = cfgmod.resolve(args)
    model = _model_from_args(args, settings)
    report = evaluate(model, args.data, sat_threshold=settings.get("infer.sat_threshold"))
    sys.stdout.write(report.table())
    _write_report(report, args.report)


def cmd_infer(args):
    settings = cfgmod.resolve(args)
    threshold = args.sat_threshold if args.sat_threshold is not None else settings.get("infer.sat_threshold")
    model = _model_from_args(args, settings)
    model.eval()
    img = read_image(args.input)
    dtype = next(model.parameters()).dtype
    out = to_image(restore(model, to_tensor(img, dtype), threshold))
    write_png(args.output, out)
    if args.grid:
        write_png(args.grid, np.concatenate([img, out], axis=1))
    print(f"wrote {args.output}")


def _parse_resolution(text):
    if text in RESOLUTIONS:
        return text, RESOLUTIONS[text]
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as e:
        raise UsageError(f"bad resolution {text!r} (use HxW or one of {', '.join(RESOLUTIONS)})") from e
    return f"{h}x{w}", (h, w)


def cmd_bench(args):
    settings = cfgmod.resolve(args)
    model = _model_from_args(args, settings)
    model.eval()
    resolutions = dict(_parse_resolution(r) for r in args.resolutions.split(","))
    if args.no_timing:
        report = MetricsReport(params=count_params(model))
        for name, (h, w) in resolutions.items():
            report.macs[name] = count_macs(model, h, w)
            report.attention_macs[name] = mac_breakdown(model, h, w).get("attention", 0)
    else:
        report = bench_inference(model, resolutions, repeats=args.repeats, seed=args.seed)
    sys.stdout.write(report.table())
    _write_report(report, args.report)


def build_parser():
    p = argparse.ArgumentParser(prog="mfdnet", description="Multi-frequency nighttime flare removal")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, sections=(), checkpoint=False):
        sp.add_argument("--config", help="key-value config file (INI sections)")
        sp.add_argument("--seed", type=int, default=0)
        if checkpoint:
            sp.add_argument("--checkpoint", help="model checkpoint (default: freshly initialized model)")
        cfgmod.add_config_flags(sp, sections)

    sp = sub.add_parser("assets", help="write procedural base and flare images")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-bases", type=int, default=4)
    sp.add_argument("--n-flares", type=int, default=4)
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_assets)

    sp = sub.add_parser("synth", help="synthesize flare-corrupted / clean PNG pairs")
    sp.add_argument("--bases", required=True)
    sp.add_argument("--flares", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True)
    common(sp, ("data",))
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("init", help="write a freshly initialized checkpoint")
    sp.add_argument("--out", required=True)
    common(sp, cfgmod.MODEL_SECTIONS)
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("train", help="train on synthetic pairs")
    sp.add_argument("--out", required=True, help="directory for checkpoints and the loss log")
    sp.add_argument("--pairs", help="directory with corrupted/ and gt/ PNG pairs")
    sp.add_argument("--bases")
    sp.add_argument("--flares")
    sp.add_argument("--eval", help="held-out pair directory for best-checkpoint selection")
    sp.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    common(sp, cfgmod.MODEL_SECTIONS + ("loss", "train", "data"), checkpoint=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="PSNR/SSIM on a paired directory")
    sp.add_argument("--data", required=True, help="directory with corrupted/ and gt/")
    sp.add_argument("--report", help="write REPORT.txt and REPORT.kv")
    common(sp, cfgmod.MODEL_SECTIONS + ("infer",), checkpoint=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="deflare one PNG")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--grid", help="also write an input|output comparison PNG")
    sp.add_argument("--sat-threshold", type=float, default=None,
                    help="luminance threshold for light-source blend-back (default 0.97)")
    common(sp, cfgmod.MODEL_SECTIONS, checkpoint=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("bench", help="GMACs / params / timing table")
    sp.add_argument("--resolutions", default="512x512,1024x1024,1080p,2K,4K")
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--no-timing", action="store_true", help="analytic counts only")
    sp.add_argument("--report", help="write REPORT.txt and REPORT.kv")
    common(sp, cfgmod.MODEL_SECTIONS, checkpoint=True)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with torch.set_grad_enabled(args.command == "train"):
            args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"mfdnet {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (IngestionError, CheckpointFormatError, CheckpointVersionError, DimensionError, OSError,
            ValueError, RuntimeError) as e:
        print(f"mfdnet {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
