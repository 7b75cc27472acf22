"""Command-line entry points.

Subcommands: gen-data, train, eval, inspect-patches, gradcheck.
Exit codes: 0 success, 2 usage error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evalkit, mining
from . import gradsuite
from .data import (Dataset, make_manifest, read_dataset, read_pnm,
                   write_dataset)
from .training import TrainConfig, evaluate, load_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _cmd_gen_data(args):
    manifest = make_manifest(args.ids, args.per_id, train_fraction=args.train_fraction,
                             seed=args.seed)
    ds = Dataset(manifest)
    write_dataset(ds, args.out)
    print(f"wrote {args.ids} identities x {args.per_id} images/modality to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    dataset = read_dataset(args.data)
    state, records = train(config, dataset, args.out)
    final = records[-1]
    print(f"finished {state.iteration} iterations; "
          f"final overall loss {final['overall']:.4f}")
    print(f"checkpoint: {Path(args.out) / 'ckpt_final.bin'}")
    return EXIT_OK


def _cmd_eval(args):
    dataset = read_dataset(args.data)
    state = load_checkpoint(args.ckpt, dataset)
    result, stats = evaluate(state.params, state.enc_cfg, dataset,
                             direction=args.direction)
    out = Path(args.json) if args.json else None
    summary = result.summary()
    print(json.dumps(summary, indent=2))
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        evalkit.write_metrics_json(result, out, extra={"direction": args.direction})
        base = out.with_suffix("")
        evalkit.write_histogram_csv(stats, f"{base}_hist.csv")
        evalkit.plot_cmc(result, f"{base}_cmc.png")
        evalkit.plot_distance_hist(stats, f"{base}_hist.png")
    return EXIT_OK


def _cmd_inspect_patches(args):
    ir_img = read_pnm(args.image)
    rgb_img = read_pnm(args.pair)
    # dataset only supplies the train-id count for the encoder config
    dataset = read_dataset(args.data)
    state = load_checkpoint(args.ckpt, dataset)
    ecfg = state.enc_cfg
    k = mining.fraction_to_k(state.config.k_fraction, ecfg.num_patches)
    ir_idx, rgb_idx = mining.mine_batch(ir_img[None], rgb_img[None], k,
                                        state.params, state.shadow, ecfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, cols = ecfg.grid
    evalkit.dump_patch_overlay(ir_img, ir_idx[0], out / "ir_highfreq.ppm",
                               rows, cols, ecfg.patch)
    evalkit.dump_patch_overlay(rgb_img, rgb_idx[0], out / "rgb_correlated.ppm",
                               rows, cols, ecfg.patch)
    print(f"wrote overlays to {out}")
    return EXIT_OK


def _cmd_gradcheck(args):
    reports = gradsuite.run_all(verbose=True)
    worst = max(r.max_rel_error for r in reports.values())
    if worst >= args.tolerance:
        print(f"FAIL: max relative error {worst:.3e} >= {args.tolerance:.0e}")
        return EXIT_NUMERIC
    print(f"OK: max relative error {worst:.3e}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hfreid",
                                     description="cross-modal retrieval toy lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=32)
    p.add_argument("--per-id", dest="per_id", type=int, default=8)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--direction", choices=("v2i", "i2v"), default="i2v")
    p.add_argument("--json", help="write metrics JSON (+ CSV histogram and figures)")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("inspect-patches", help="dump mined-patch overlays")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image", required=True, help="IR image (PGM)")
    p.add_argument("--pair", required=True, help="paired RGB image (PPM)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_inspect_patches)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ArithmeticError,) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
