"""Command-line surface: synthesize data, train, evaluate, predict,
gradient-check, count parameters, and emit perturbation grids.

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage or configuration
error. Every command validates its inputs before any side effect, and all
randomized commands are deterministic under ``--seed``. The environment
variable ``CAPSROUTE_THREADS`` caps internal parallelism (1 also gives
bitwise-reproducible training).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import layers as L
from . import losses
from . import model as M
from . import train as TR
from .gradcheck import finite_difference_check


class UsageError(ValueError):
    """Bad flags or configuration; maps to exit code 2."""


def _cap_threads():
    threads = os.environ.get("CAPSROUTE_THREADS")
    if not threads:
        return
    try:
        n = max(1, int(threads))
    except ValueError:
        raise UsageError(f"CAPSROUTE_THREADS must be an integer, got {threads!r}")
    try:
        import numba

        numba.set_num_threads(n)
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# portable float grid (length maps): text header "PFG <h> <w>\n" then
# little-endian float32 row-major


def write_pfg(path, values):
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"PFG stores 2-D grids, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"PFG {h} {w}\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pfg(path):
    blob = Path(path).read_bytes()
    nl = blob.index(b"\n")
    parts = blob[:nl].split()
    if len(parts) != 3 or parts[0] != b"PFG":
        raise ValueError(f"{path}: not a PFG file")
    h, w = int(parts[1]), int(parts[2])
    need = h * w * 4
    raster = blob[nl + 1 :]
    if len(raster) != need:
        raise ValueError(f"{path}: expected {need} raster bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype="<f4").reshape(h, w).copy()


# ---------------------------------------------------------------------------
# shared option handling


def _model_config(args, size_flag=None):
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        cfg = C.model_config_from_text(path.read_text())
    elif getattr(args, "preset", None):
        cfg = M.preset(args.preset, input_size=size_flag)
    else:
        raise UsageError("one of --preset or --config is required")
    return cfg


def _entries(args):
    if getattr(args, "config", None):
        return C.parse_config_text(Path(args.config).read_text())
    return {}


def _load_trained(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    cfg_path = getattr(args, "config", None)
    return TR.load_model(ckpt, cfg_path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    if args.n < 0:
        raise UsageError(f"--n must be >= 0, got {args.n}")
    out = Path(args.out)
    samples = D.synth_generate(args.n, args.size, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        D.save_sample(sample, out)
    print(f"wrote {2 * len(samples)} files to {out}")
    return 0


def cmd_train(args):
    cfg = _model_config(args, size_flag=args.size)
    entries = _entries(args)
    sched_kwargs = C.schedule_kwargs_from_entries(entries)
    if args.iterations is not None:
        sched_kwargs["max_iterations"] = args.iterations
    if args.lr is not None:
        sched_kwargs["lr"] = args.lr
    if args.val_every is not None:
        sched_kwargs["val_every"] = args.val_every
    schedule = TR.TrainSchedule(**sched_kwargs)
    aug = C.augment_config_from_entries(entries)
    if args.no_augment:
        aug = D.AugmentConfig.disabled()
    samples = D.load_dataset(args.data, exclude=args.exclude)
    if not samples:
        raise UsageError(f"no samples found under {args.data}")
    if args.folds < 1:
        raise UsageError("--folds must be >= 1")
    shape = samples[0].image.shape
    if shape != (cfg.height, cfg.width):
        raise UsageError(
            f"dataset extents {shape[0]}x{shape[1]} differ from model "
            f"{cfg.height}x{cfg.width}"
        )
    result = TR.cross_validate(cfg, samples, args.folds, args.seed, schedule,
                               args.out, aug)
    for i, r in enumerate(result.fold_results):
        print(
            f"fold {i}: dice {r.best_dice:.4f} at iteration {r.best_iteration} "
            f"({r.stop_reason}, {r.iterations_run} iterations)"
        )
        if r.stop_reason == "diverged":
            print("training diverged", file=sys.stderr)
            return 1
    print(f"median dice: {result.median_dice:.4f}")
    return 0


def cmd_eval(args):
    model = _load_trained(args)
    samples = D.load_dataset(args.data, exclude=args.exclude)
    if not samples:
        raise UsageError(f"no samples under {args.data}")
    shape = samples[0].image.shape
    if shape != (model.config.height, model.config.width):
        raise UsageError(
            f"dataset extents {shape} differ from checkpoint config "
            f"{model.config.height}x{model.config.width}"
        )
    tau = args.threshold if args.threshold is not None else model.config.threshold
    dices = []
    print("sample\tdice")
    for s in samples:
        mask, _, _ = model.predict_mask(s.image, threshold=tau)
        d = losses.dice(mask, s.mask)
        dices.append(d)
        print(f"{s.identifier}\t{d:.4f}")
    print(f"median\t{losses.median_aggregate(dices):.4f}")
    return 0


def cmd_predict(args):
    model = _load_trained(args)
    image = D.read_gray(args.image).astype(np.float64) / 255.0
    if image.shape != (model.config.height, model.config.width):
        raise UsageError(
            f"image extents {image.shape} differ from checkpoint config "
            f"{model.config.height}x{model.config.width}"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask, lengths, grid = model.predict_mask(image)
    from . import tensor as T

    with T.no_grad():
        recon = model.reconstruct(grid, mask).data
    stem = Path(args.image).stem
    D.write_pgm(out / f"{stem}_pred_mask.pgm", (mask * 255).astype(np.uint8))
    write_pfg(out / f"{stem}_lengths.pfg", lengths)
    D.write_pgm(out / f"{stem}_recon.pgm",
                np.clip(np.rint(np.asarray(recon) * 255.0), 0, 255).astype(np.uint8))
    print(f"wrote mask/lengths/reconstruction for {stem} to {out}")
    return 0


def cmd_gradcheck(args):
    cfg = _model_config(args, size_flag=args.size)
    reports, ok = finite_difference_check(
        cfg, seed=args.seed, samples_per_tensor=args.samples,
        tolerance=args.tolerance,
    )
    print("layer\tmax_rel_error\tchecked")
    for r in reports:
        print(f"{r.name}\t{r.max_rel_error:.3e}\t{r.checked}")
    if not ok:
        bad = [r.name for r in reports if not r.passed(args.tolerance)]
        print(f"FAIL: gradient mismatch in {', '.join(bad)}", file=sys.stderr)
        return 1
    print(f"PASS: all layers within {args.tolerance:g}")
    return 0


def cmd_params(args):
    if args.example:
        if args.example != "sabour-layer":
            raise UsageError(f"unknown example {args.example!r}")
        print(M.SABOUR_LAYER_PARAMS)
        return 0
    cfg = _model_config(args, size_flag=args.size)
    model = M.build(cfg, seed=0)
    counts = model.layer_param_counts()
    print("layer\tparameters")
    for name, count in counts:
        print(f"{name}\t{count}")
    total = model.param_count()
    print(f"total\t{total}")
    if args.reference:
        if args.reference == "unet":
            ref = M.count_unet_params()
        elif args.reference in M.PRESET_NAMES:
            ref = M.build(M.preset(args.reference), seed=0).param_count()
        else:
            raise UsageError(f"unknown reference {args.reference!r}")
        reduction = M.report_reduction(total, ref)
        print(f"reference {args.reference}\t{ref}")
        print(f"reduction\t{reduction:.1f}%")
    return 0


def _parse_dims(text, pose_dim):
    if ".." in text:
        lo, hi = text.split("..", 1)
        dims = list(range(int(lo), int(hi)))
    else:
        dims = [int(v) for v in text.split(",") if v.strip()]
    for d in dims:
        if not 0 <= d < pose_dim:
            raise UsageError(f"dimension {d} out of range [0, {pose_dim})")
    return dims


def cmd_perturb(args):
    model = _load_trained(args)
    image = D.read_gray(args.image).astype(np.float64) / 255.0
    if image.shape != (model.config.height, model.config.width):
        raise UsageError(
            f"image extents {image.shape} differ from checkpoint config "
            f"{model.config.height}x{model.config.width}"
        )
    mask, _, grid = model.predict_mask(image)
    pose_dim = grid.pose_dim
    dims = _parse_dims(args.dims, pose_dim)
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    deltas = (
        np.linspace(-args.range, args.range, args.steps)
        if args.steps > 1
        else np.array([0.0])
    )
    rows = []
    for dim in dims:
        images = L.perturb_capsule(grid, dim, deltas, mask, model.decoder)
        rows.append(np.concatenate(images, axis=1))
    sheet = np.concatenate(rows, axis=0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.write_pgm(out, np.clip(np.rint(sheet * 255.0), 0, 255).astype(np.uint8))
    print(f"wrote {len(dims)}x{args.steps} perturbation grid to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="capsroute",
        description="Capsule-network segmentation: train, evaluate, inspect.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train with k-fold cross-validation")
    p.add_argument("--preset", choices=M.PRESET_NAMES)
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, help="override preset input size")
    p.add_argument("--iterations", type=int, help="max training iterations")
    p.add_argument("--lr", type=float)
    p.add_argument("--val-every", type=int, dest="val_every")
    p.add_argument("--exclude", help="identifier exclusion list file")
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--config", help="model config (default: checkpoint sidecar)")
    p.add_argument("--exclude")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--preset", choices=M.PRESET_NAMES, default="segcaps-tiny")
    p.add_argument("--config")
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=6,
                   help="entries checked per parameter tensor")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts and reductions")
    p.add_argument("--preset", choices=M.PRESET_NAMES)
    p.add_argument("--config")
    p.add_argument("--example", help="named arithmetic example (sabour-layer)")
    p.add_argument("--reference", help="reference network for reduction (unet)")
    p.add_argument("--size", type=int)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("perturb", help="pose-dimension perturbation grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--dims", default="0..16", help="range a..b or list a,b,c")
    p.add_argument("--range", type=float, default=0.25)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_perturb)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _cap_threads()
        return args.fn(args)
    except (UsageError, M.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TR.CheckpointError, D.DatasetError, ValueError, OSError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
