"""Command-line entry point: ``stcnn <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import dataio, harness
from .arrangements import affine_cell_bound, pattern_count_bound, pattern_count_bound_closed_form, sample_patterns

SUBCOMMANDS = {
    "toy": "toy_fit",
    "opt-compare": "optimizer_compare",
    "init-compare": "init_compare",
    "gap-verify": "gap_verify",
    "denoise": "denoise",
}

# flag -> config key; nested keys are dotted
_FLAGS = {
    "toy": "toy",
    "toy-bias": "toy_bias",
    "images": "images_path",
    "labels": "labels_path",
    "train-count": "train_count",
    "test-count": "test_count",
    "crop": "crop",
    "sigmas": "sigmas",
    "K": "K",
    "max-K": "max_K",
    "m": "m",
    "lam": "lam",
    "beta": "beta",
    "optimizer": "optimizer.kind",
    "lr": "optimizer.learning_rate",
    "steps": "optimizer.steps",
    "asgd-average-start": "optimizer.asgd_average_start",
    "init": "init.kind",
    "init-std": "init.normal_std",
    "init-seed": "init.seed",
    "dual-max-iters": "dual.max_iters",
    "dual-stop-tol": "dual.stop_tol",
    "dual-units": "dual.max_units",
    "dual-step-rule": "dual.step_rule",
    "conventions": "conventions",
    "reading": "reading",
    "pattern-draws": "pattern_draws",
    "trials": "trials",
    "compare-lrs": "compare_learning_rates",
    "output-dir": "output_dir",
    "seed": "master_seed",
}


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    for flag, key in _FLAGS.items():
        nargs = "+" if key in ("sigmas", "conventions", "compare_learning_rates") else None
        p.add_argument(f"--{flag}", dest=key, nargs=nargs, default=None, metavar=key.split(".")[-1].upper())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stcnn", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        _add_experiment_flags(sub.add_parser(name))
    p = sub.add_parser("patterns", help="sample region patterns and write them as JSON")
    p.add_argument("--toy", default="fig1", choices=sorted(dataio.TOYS))
    p.add_argument("--image", help="IDX image file; uses the first image instead of a toy")
    p.add_argument("--crop", type=int, default=8)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--draws", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output path (default stdout)")
    b = sub.add_parser("bound", help="arrangement counting bounds")
    b.add_argument("--I", type=int, required=True)
    b.add_argument("--r", type=int, required=True)
    return ap


def config_from_args(args: argparse.Namespace) -> harness.ExperimentConfig:
    base = harness.ExperimentConfig(experiment=SUBCOMMANDS[args.command])
    if args.config:
        base = harness.read_config_file(args.config, base)
    overrides = {}
    for key in _FLAGS.values():
        val = getattr(args, key)
        if val is not None:
            overrides[key] = " ".join(val) if isinstance(val, list) else val
    return harness.parse_overrides(overrides, base)


def _patterns(args) -> int:
    if args.image:
        img = dataio.center_crop(dataio.load_mnist_idx(args.image)[0], args.crop)
        Y = dataio.im2col(img, args.m)
    else:
        Y, _ = dataio.TOYS[args.toy]()
    ps = sample_patterns(Y, args.lam, args.draws, args.seed)
    text = ps.to_json(args.out)
    if args.out is None:
        print(text)
    else:
        print(f"{len(ps)} patterns -> {args.out}")
    return 0


def _bound(args) -> int:
    if hasattr(sys, "set_int_max_str_digits"):
        sys.set_int_max_str_digits(0)  # exact counts can run to many thousands of digits
    out = {"I": args.I, "r": args.r, "pattern_count_bound": pattern_count_bound(args.I, args.r),
           "affine_cell_bound": affine_cell_bound(args.I, args.r)}
    try:
        out["closed_form"] = pattern_count_bound_closed_form(args.I, args.r)
    except OverflowError:
        out["closed_form"] = None
    print(json.dumps(out))
    return 0


def _print_result(result) -> None:
    records = result if isinstance(result, list) else [result] if isinstance(result, harness.GapSummary) else None
    if records is None:
        records = [harness.GapSummary(**r) for r in result["records"]]
    for r in records:
        duals = " ".join(f"dual[{c}]={d:.6g}" for c, d in r.dual_finals.items())
        print(f"{r.label}: primal={r.best_primal:.6g} {duals} gap={100 * r.best_gap:.2f}% ({r.better_convention})")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "patterns":
            return _patterns(args)
        if args.command == "bound":
            return _bound(args)
        config = config_from_args(args)
        _print_result(harness.run(config))
    except (ValueError, KeyError, FileNotFoundError, dataio.IdxFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
