"""Command line entry point: ``robustfield {gen,train,eval,render,hist,sweep}``.

Usage errors (bad flags, missing inputs) exit with status 2, runtime
failures with status 1.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path


from .camera import orbit_cameras
from .evaluate import evaluate_checkpoint, residual_histogram
from .field import load_checkpoint
from .mask import MaskMode
from .render import render_image, write_render
from .scene import Dataset, build_scene, generate_dataset, load_dataset
from .train import LossMode, TrainConfig, run_training

logger = logging.getLogger("robustfield")

SWEEP_AXES = ("trim_quantile", "clutter_fraction", "neighborhood", "loss_mode", "mask_mode")
_AXIS_ALIASES = {"loss": "loss_mode", "mask": "mask_mode", "inner_patch": "neighborhood", "patch": "neighborhood"}
SWEEP_HEADER = ("axis", "value", "eval_psnr", "eval_ssim", "mask_iou", "steps", "seconds")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# flag groups


def _add_data_flags(p, seed_help="scene and training seed (default 0)"):
    g = p.add_argument_group("dataset")
    g.add_argument("--difficulty", choices=["easy", "medium", "hard"], default="hard")
    g.add_argument("--clutter-fraction", type=float, default=1.0)
    g.add_argument("--image-size", type=int, default=96)
    g.add_argument("--n-train", type=int, default=60)
    g.add_argument("--n-eval", type=int, default=20)
    g.add_argument("--seed", type=int, default=0, help=seed_help)


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--config", type=Path, help="JSON training config; flags given explicitly override it")
    g.add_argument("--loss", choices=[m.value for m in LossMode if m is not LossMode.KERNEL])
    g.add_argument("--mask-mode", choices=[m.value for m in MaskMode])
    g.add_argument("--trim-quantile", type=float)
    g.add_argument("--neighborhood", type=int)
    g.add_argument("--inner-patch", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--patches", type=int, dest="patches_per_batch", help="patches per batch")
    g.add_argument("--lr-init", type=float)
    g.add_argument("--lr-final", type=float)
    g.add_argument("--resolution", type=int, help="voxel grid resolution per axis")
    g.add_argument("--n-samples", type=int, help="samples per ray")
    g.add_argument("--eval-interval", type=int)
    g.add_argument("--dump-masks", type=int, metavar="INTERVAL", help="write mask stages every INTERVAL steps")


def build_parser():
    parser = argparse.ArgumentParser(prog="robustfield", description="Robust radiance field toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_data_flags(p, "scene seed (default 0)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a field; writes field.rfv and metrics.csv")
    p.add_argument("--data", type=Path, help="dataset directory (default: generate from the dataset flags)")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="score a checkpoint on the eval split; writes eval.csv")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--include-train", action="store_true", help="also score train frames, with mask metrics")
    p.add_argument("--out", type=Path, required=True, help="CSV path, or a directory to hold eval.csv")

    p = sub.add_parser("render", help="render frames along an orbit")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--radius", type=float, default=4.2)
    p.add_argument("--elevation", type=float, default=30.0, help="degrees")
    p.add_argument("--fov", type=float, default=36.0, help="degrees")
    p.add_argument("--png", action="store_true", help="also write PNG copies")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("hist", help="residual histograms split by oracle label")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--split", choices=["train"], default="train")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("sweep", help="train and evaluate over one axis; writes sweep.csv")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--axis", required=True, help=f"one of {', '.join(SWEEP_AXES)}")
    p.add_argument("--values", required=True, help="comma separated; neighborhood takes N or N:INNER")
    p.add_argument("--jobs", type=int, default=1, help="sweep points run in parallel (default 1, sequential)")
    p.add_argument("--out", type=Path, required=True)
    return parser


# --------------------------------------------------------------------------
# helpers


def _require(path: Path, what):
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _dataset_from_flags(args) -> Dataset:
    spec = build_scene(args.difficulty, seed=args.seed, clutter_fraction=args.clutter_fraction)
    return generate_dataset(spec, n_train=args.n_train, n_eval=args.n_eval, image_size=args.image_size)


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(_require(args.config, "config")) if args.config else TrainConfig()
    cfg = cfg.with_(seed=args.seed)
    top = {"loss": "loss_mode", "steps": "steps", "patches_per_batch": "patches_per_batch",
           "lr_init": "lr_init", "lr_final": "lr_final", "resolution": "resolution",
           "n_samples": "n_samples", "eval_interval": "eval_interval", "dump_masks": "dump_masks"}
    over = {dst: getattr(args, src) for src, dst in top.items() if getattr(args, src) is not None}
    if "lr_init" in over and "lr_final" not in over:
        over["lr_final"] = over["lr_init"] * cfg.lr_final / cfg.lr_init
    masks = {"mask_mode": "mode", "trim_quantile": "trim_quantile", "neighborhood": "neighborhood",
             "inner_patch": "inner_patch"}
    over.update({dst: getattr(args, src) for src, dst in masks.items() if getattr(args, src) is not None})
    if "neighborhood" in over and "inner_patch" not in over:
        over["inner_patch"] = over["neighborhood"] // 2
    return cfg.with_(**over)


def _parse_axis(axis, values):
    axis = _AXIS_ALIASES.get(axis, axis)
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    raw = [v.strip() for v in values.split(",") if v.strip()]
    if not raw:
        raise UsageError("--values is empty")
    points = []
    try:
        for v in raw:
            if axis in ("trim_quantile", "clutter_fraction"):
                points.append((v, float(v)))
            elif axis == "neighborhood":
                n, _, inner = v.partition(":")
                points.append((v, (int(n), int(inner) if inner else int(n) // 2)))
            elif axis == "loss_mode":
                points.append((v, LossMode.parse(v)))
            else:
                points.append((v, MaskMode.parse(v)))
    except ValueError as exc:
        raise UsageError(f"bad --values entry for {axis}: {exc}") from None
    return axis, points


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else format(v, ".17g")
    return str(v)


# --------------------------------------------------------------------------
# commands


def cmd_gen(args):
    ds = _dataset_from_flags(args)
    from .scene import write_dataset

    write_dataset(ds, args.out)
    print(f"wrote {len(ds.frames)} frames to {args.out} "
          f"(distractor occupancy {ds.manifest['distractor_occupancy']:.3f})")


def cmd_train(args):
    ds = load_dataset(_require(args.data, "dataset")) if args.data else _dataset_from_flags(args)
    cfg = _train_config(args)
    result = run_training(cfg, ds, args.out)
    last = result.history[-1] if result.history else {}
    print(f"trained {cfg.steps} steps in {result.seconds:.1f}s; eval PSNR {last.get('eval_psnr')}; "
          f"checkpoint {args.out / 'field.rfv'}")


def cmd_eval(args):
    ds = load_dataset(_require(args.data, "dataset"))
    _require(args.checkpoint, "checkpoint")
    out = args.out / "eval.csv" if args.out.suffix != ".csv" else args.out
    _, agg = evaluate_checkpoint(args.checkpoint, ds, out, include_train=args.include_train)
    for a in agg:
        print(f"{a['split']}: psnr {a['psnr']:.3f} ssim {a['ssim']:.4f}")
    print(f"wrote {out}")


def cmd_render(args):
    field, meta = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    n_samples = int(meta.get("config", {}).get("n_samples", 64))
    bg = meta.get("background", (0.0, 0.0, 0.0))
    center = (field.lo + field.hi) / 2
    cams = orbit_cameras(center, args.radius, args.frames, args.image_size, args.fov, args.elevation)
    step = int(meta.get("steps", 0))
    for i, cam in enumerate(cams):
        write_render(render_image(field, cam, n_samples, bg), args.out, i, step, png=args.png)
    print(f"wrote {len(cams)} frames to {args.out}")


def cmd_hist(args):
    ds = load_dataset(_require(args.data, "dataset"))
    hists = residual_histogram(_require(args.checkpoint, "checkpoint"), ds, args.split, args.bins, out_dir=args.out)
    for label, h in hists.items():
        print(f"{label}: {int(h.counts.sum())} pixels")


def _sweep_point(axis, label, value, base, ds, data_kw, out_dir):
    cfg = base
    if axis == "clutter_fraction":
        spec = build_scene(data_kw["difficulty"], seed=data_kw["seed"], clutter_fraction=value)
        ds = generate_dataset(spec, n_train=data_kw["n_train"], n_eval=data_kw["n_eval"],
                              image_size=data_kw["image_size"])
    elif axis == "trim_quantile":
        cfg = base.with_(trim_quantile=value)
    elif axis == "neighborhood":
        cfg = base.with_(neighborhood=value[0], inner_patch=value[1])
    elif axis == "loss_mode":
        cfg = base.with_(loss_mode=value)
    else:
        cfg = base.with_(mode=value)
    point_dir = out_dir / f"{axis}_{label.replace(':', '-')}"
    t0 = time.perf_counter()
    result = run_training(cfg, ds, point_dir)
    _, agg = evaluate_checkpoint(result.field, ds, point_dir / "eval.csv", n_samples=cfg.n_samples)
    ev = next(a for a in agg if a["split"] == "eval")
    return {"axis": axis, "value": label, "eval_psnr": ev["psnr"], "eval_ssim": ev["ssim"],
            "mask_iou": result.history[-1].get("mask_iou") if result.history else None,
            "steps": cfg.steps, "seconds": round(time.perf_counter() - t0, 3)}


def cmd_sweep(args):
    axis, points = _parse_axis(args.axis, args.values)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    base = _train_config(args)
    shared = None if axis == "clutter_fraction" else _dataset_from_flags(args)
    data_kw = {k: getattr(args, k) for k in ("difficulty", "seed", "n_train", "n_eval", "image_size")}
    args.out.mkdir(parents=True, exist_ok=True)
    jobs = [(axis, label, value, base, shared, data_kw, args.out) for label, value in points]
    if args.jobs == 1:
        rows = []
        for job in jobs:
            rows.append(_sweep_point(*job))
            print(f"{axis}={rows[-1]['value']}: eval PSNR {rows[-1]['eval_psnr']:.3f}", flush=True)
    else:
        # rows keep the order of --values whatever the finishing order
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_point, *zip(*jobs)))
    path = args.out / "sweep.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in SWEEP_HEADER])
    print(f"wrote {path}")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "render": cmd_render,
            "hist": cmd_hist, "sweep": cmd_sweep}


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"robustfield {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        logger.debug("failure", exc_info=True)
        print(f"robustfield {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_cli())
