"""Command-line entry points.

Subcommands: gen-data, train, register, evaluate, optimize-lambda,
sweep-lambda. Delimited outputs (CSV/JSON) are written first; each report
path also renders a matplotlib figure next to its table. Exit codes:
0 success, 2 invalid arguments or unusable paths, 3 checkpoint format
mismatch. The environment variable ``SPATREG_SEED`` overrides any seed.
"""

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import evaluate as evaluate_mod
from . import figures, hyperopt, io, phantoms
from .grid import warp
from .metrics import deformation_report, jacobian_det
from .network import RunConfig
from .train import TrainingDivergedError, train
from .weighting import build_reg_weights

DEFAULT_LEVELS = 3
EXIT_USAGE = 2
EXIT_VERSION = 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _resolve_seed(seed):
    env = os.environ.get("SPATREG_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"SPATREG_SEED must be an integer, got {env!r}")
    return int(seed)


def _parse_shape(text):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise CliError(f"bad --shape {text!r}")
    if len(dims) == 1:
        dims = (dims[0], dims[0])
    if len(dims) not in (2, 3) or any(d < 1 for d in dims):
        raise CliError(f"bad --shape {text!r}: need 2 or 3 positive dims")
    return dims


def _parse_floats(text, flag):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise CliError(f"bad {flag} {text!r}: expected comma-separated numbers")


def _parse_lambda(text, regions):
    values = _parse_floats(text, "--lambda")
    if len(values) != regions:
        raise CliError(
            f"--lambda has {len(values)} entries but the model conditions on "
            f"{regions} regions"
        )
    return np.asarray(values)


def _load_checkpoint(path):
    try:
        return io.load_checkpoint(path)
    except io.CheckpointVersionError as e:
        raise CliError(str(e), code=EXIT_VERSION)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}")


def _ensure_outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write_probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as e:
        raise CliError(f"output path not writable: {path} ({e})")
    return path


def _lambda_str(values):
    return ";".join(f"{float(v):.4f}" for v in values)


def cmd_gen_data(args):
    seed = _resolve_seed(args.seed)
    shape = _parse_shape(args.shape)
    if min(shape) // 2 ** (DEFAULT_LEVELS - 1) < 4:
        raise CliError(
            f"shape incompatible with pyramid depth: {shape} gives "
            f"{min(shape) // 2 ** (DEFAULT_LEVELS - 1)} voxels at the coarsest "
            f"of {DEFAULT_LEVELS} levels (minimum 4)"
        )
    if args.pairs < 1:
        raise CliError("--pairs must be >= 1")
    roughness = (
        _parse_floats(args.roughness, "--roughness")
        if args.roughness else list(phantoms.DEFAULT_ROUGHNESS[: args.regions])
    )
    if len(roughness) != args.regions:
        raise CliError(
            f"--roughness has {len(roughness)} entries, expected {args.regions}"
        )
    out = _ensure_outdir(args.out)
    pairs = phantoms.gen_dataset(
        seed, args.pairs, shape=shape, regions=args.regions,
        roughness=roughness, identity_every=args.identity_every,
    )
    meta = {
        "seed": seed,
        "shape": list(shape),
        "regions": args.regions,
        "roughness": roughness,
    }
    meta["config_hash"] = io.config_hash(meta)
    path = io.save_dataset(
        out, pairs, meta, pair_seeds=[seed + i for i in range(len(pairs))]
    )
    print(f"wrote {len(pairs)} pairs, manifest {path}")
    return 0


def cmd_train(args):
    with open(args.config) as f:
        cfg_dict = json.load(f)
    pairs, manifest = io.load_dataset(args.data)
    cfg_dict.setdefault("image_shape", tuple(manifest["shape"]))
    cfg_dict.setdefault("regions", manifest["regions"])
    if tuple(cfg_dict["image_shape"]) != tuple(manifest["shape"]):
        raise CliError(
            f"config image_shape {cfg_dict['image_shape']} does not match "
            f"dataset shape {manifest['shape']}"
        )
    if cfg_dict["regions"] != manifest["regions"]:
        raise CliError(
            f"config regions {cfg_dict['regions']} does not match dataset "
            f"regions {manifest['regions']}"
        )
    try:
        config = RunConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad config: {e}")
    config.seed = _resolve_seed(config.seed)

    out = _ensure_outdir(args.out)
    try:
        model, curve = train(
            pairs, config, progress=not args.quiet, diagnostics_dir=out
        )
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 1

    ckpt = os.path.join(out, "checkpoint.ckpt")
    curve_csv = os.path.join(out, "curve.csv")
    curve_png = os.path.join(out, "curve.png")
    io.save_checkpoint(ckpt, model)
    io.save_curve_csv(curve_csv, curve)
    figures.save_training_curve(curve, curve_png)
    manifest_path = os.path.join(out, "experiment.json")
    io.write_manifest(
        manifest_path,
        {
            "config": config.to_dict(),
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "dataset_manifest": os.path.abspath(args.data),
            "checkpoint": ckpt,
            "curve_csv": curve_csv,
            "curve_png": curve_png,
        },
        file_keys=[os.path.abspath(args.data), ckpt, curve_csv, curve_png],
    )
    print(f"trained {config.levels} levels, checkpoint {ckpt}")
    return 0


def cmd_register(args):
    model, _ = _load_checkpoint(args.checkpoint)
    cfg = model.config
    lam = _parse_lambda(args.lam, cfg.regions)
    fixed, _ = io.load_array(args.fixed)
    moving, _ = io.load_array(args.moving)
    labels, _ = io.load_array(args.labels)
    moving_labels = labels
    if args.moving_labels:
        moving_labels, _ = io.load_array(args.moving_labels)
    out = _ensure_outdir(args.out)

    weights = build_reg_weights(labels, lam, sigma=cfg.smooth_sigma,
                                window=cfg.smooth_window)
    with torch.no_grad():
        u, phi = model.register(fixed, moving, weights,
                                smoothed=args.weighting == "smoothed")
        warped = warp(moving, phi)
        jdet = jacobian_det(phi)
        report = deformation_report(phi, labels, moving_labels, cfg.regions)

    io.save_array(os.path.join(out, "warped.arr"), warped, "image")
    io.save_array(os.path.join(out, "displacement.arr"), u, "displacement")
    io.save_array(os.path.join(out, "deformation.arr"), phi, "displacement")
    io.save_array(os.path.join(out, "jacobian.arr"), jdet, "image")
    report_dict = report.to_dict()
    report_dict["lambda"] = [float(v) for v in lam]
    report_dict["weighting"] = args.weighting
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report_dict, f, indent=2, sort_keys=True)
        f.write("\n")
    figures.save_register_panel(
        fixed.numpy(), moving.numpy(), warped.numpy(), jdet.numpy(),
        os.path.join(out, "register.png"),
    )
    print(
        f"dice_avg {report.dice_avg:.4f}  folding {report.folding_pct:.4f}%  "
        f"outputs in {out}"
    )
    return 0


EVALUATE_HEADER = "method,avg_dice,folding_pct,jac_grad_mean,jac_std,lambda_star"


def cmd_evaluate(args):
    model, _ = _load_checkpoint(args.checkpoint)
    pairs, _ = io.load_dataset(args.data)
    lam = _parse_lambda(args.lam, model.config.regions)
    smoothed = args.weighting == "smoothed"
    reports = evaluate_mod.evaluate_model(model, pairs, lam, smoothed=smoothed)
    agg = evaluate_mod.aggregate_reports(reports)
    method = args.method or ("pyramid_smoothed" if smoothed else "pyramid_raw")

    report_path = args.report
    _ensure_outdir(os.path.dirname(os.path.abspath(report_path)))
    with open(report_path, "w") as f:
        f.write(EVALUATE_HEADER + "\n")
        f.write(
            f"{method},{agg['dice_avg']:.6f},{agg['folding_pct']:.6f},"
            f"{agg['jac_grad_mean']:.8f},{agg['jac_std']:.8f},{_lambda_str(lam)}\n"
        )
    stem = os.path.splitext(report_path)[0]
    with open(stem + ".jsonl", "w") as f:
        for i, r in enumerate(reports):
            row = r.to_dict()
            row["pair"] = i
            f.write(json.dumps(row, sort_keys=True) + "\n")
    figures.save_dice_boxplot(reports, stem + ".png")
    print(f"evaluated {len(pairs)} pairs: dice {agg['dice_avg']:.4f}, "
          f"folding {agg['folding_pct']:.4f}% -> {report_path}")
    return 0


def cmd_optimize_lambda(args):
    model, _ = _load_checkpoint(args.checkpoint)
    cfg = model.config
    pairs, _ = io.load_dataset(args.val_data)
    init = (
        _parse_lambda(args.init, cfg.regions)
        if args.init else np.ones(cfg.regions)
    )
    out = _ensure_outdir(args.out)
    result = hyperopt.optimize_lambda(
        model, pairs, init, steps=args.steps, lr=args.lr,
        smoothed=args.weighting == "smoothed",
    )
    with open(os.path.join(out, "lambda_star.json"), "w") as f:
        json.dump(
            {
                "lambda_star": [float(v) for v in result.lambda_star],
                "best_dice": result.best_dice,
                "steps": args.steps,
                "lr": args.lr,
                "init": [float(v) for v in init],
            },
            f, indent=2, sort_keys=True,
        )
        f.write("\n")
    with open(os.path.join(out, "trajectory.json"), "w") as f:
        json.dump(result.trajectory, f, indent=2, sort_keys=True)
        f.write("\n")
    if result.trajectory:
        figures.save_trajectory_figure(
            result.trajectory, os.path.join(out, "trajectory.png")
        )
    print(
        f"lambda* {_lambda_str(result.lambda_star)} "
        f"(soft dice {result.best_dice:.4f}) -> {out}"
    )
    return 0


def cmd_sweep_lambda(args):
    model, _ = _load_checkpoint(args.checkpoint)
    cfg = model.config
    pairs, _ = io.load_dataset(args.data)
    if not 0 <= args.region < cfg.regions:
        raise CliError(
            f"--region {args.region} outside [0, {cfg.regions - 1}]"
        )
    grid = _parse_floats(args.grid, "--grid")
    base = (
        np.asarray(_parse_floats(args.base, "--base"))
        if args.base else np.ones(cfg.regions)
    )
    if base.shape != (cfg.regions,):
        raise CliError(f"--base needs {cfg.regions} entries")
    out = _ensure_outdir(args.out)
    rows = hyperopt.sweep_lambda(
        model, pairs, args.region, grid, base_lambda=base,
        smoothed=args.weighting == "smoothed",
    )
    csv_path = os.path.join(out, f"sweep_region{args.region}.csv")
    with open(csv_path, "w") as f:
        cols = ["lambda_k"] + [f"dice_{i}" for i in range(cfg.regions)] + ["folding_pct"]
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(f"{row[c]:.6f}" for c in cols) + "\n")
    figures.save_sweep_figure(
        rows, args.region, os.path.join(out, f"sweep_region{args.region}.png")
    )
    print(f"swept region {args.region} over {len(grid)} values -> {csv_path}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="spatreg",
        description="Deformable registration with spatially-variant, tunable "
                    "smoothness regularization.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--shape", default="64", help="e.g. 64 or 64,64 or 48,48,48")
    g.add_argument("--pairs", type=int, default=10)
    g.add_argument("--regions", type=int, default=5)
    g.add_argument("--roughness", default=None,
                   help="per-region deformation roughness, comma-separated")
    g.add_argument("--identity-every", type=int, default=8,
                   help="make every Nth pair an identical pair (0 disables)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a registration model")
    t.add_argument("--config", required=True, help="RunConfig JSON")
    t.add_argument("--data", required=True, help="dataset manifest JSON")
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register one pair with a trained model")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--labels", required=True,
                   help="fixed-image label container (drives the weighting)")
    r.add_argument("--moving-labels", default=None,
                   help="moving-image labels for the Dice report "
                        "(defaults to --labels)")
    r.add_argument("--lambda", dest="lam", required=True,
                   help='per-region weights, e.g. "3.76,2.42,2.61,2.33,0.67"')
    r.add_argument("--weighting", choices=("smoothed", "raw"), default="smoothed")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="evaluate a model over a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--lambda", dest="lam", required=True)
    e.add_argument("--weighting", choices=("smoothed", "raw"), default="smoothed")
    e.add_argument("--method", default=None, help="method column value")
    e.add_argument("--report", required=True, help="output CSV path")
    e.set_defaults(func=cmd_evaluate)

    o = sub.add_parser("optimize-lambda",
                       help="tune per-region weights on a validation set")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--val-data", required=True)
    o.add_argument("--steps", type=int, default=100)
    o.add_argument("--lr", type=float, default=0.1)
    o.add_argument("--init", default=None, help="starting weights (default all 1)")
    o.add_argument("--weighting", choices=("smoothed", "raw"), default="smoothed")
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_optimize_lambda)

    s = sub.add_parser("sweep-lambda",
                       help="sweep one region's weight over a grid")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--region", type=int, required=True)
    s.add_argument("--grid", default="0.5,1,2,4,8")
    s.add_argument("--base", default=None, help="weights of the other regions")
    s.add_argument("--weighting", choices=("smoothed", "raw"), default="smoothed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_lambda)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
