#!/usr/bin/env python3

"""Evaluates a checkpoint (or the frequency prior baseline) on a dataset split."""

import argparse
import json
import sys

from pathlib import Path

import iter_sgg as sgg


def parse_ks(value):
    try:
        ks = [int(k) for k in value.split(",") if k]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid K list {value!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError(f"invalid K list {value!r}")
    return ks


def parse_layer(value):
    if value == "all":
        return value
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"layer must be an integer or 'all', got {value!r}") from None


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", type=Path, help="the checkpoint to evaluate")
    p.add_argument("--config", type=str, help="the configuration file (frequency prior only)")
    p.add_argument("--data", type=Path, required=True, help="the dataset manifest or directory")
    p.add_argument("--device", type=str, default="cpu", help="the device to evaluate on")
    p.add_argument("--freq-prior", action="store_true", help="evaluate the frequency prior baseline")
    p.add_argument("--k", type=parse_ks, help="the K values, comma separated")
    p.add_argument("--layer", type=parse_layer, default="all", help="the refinement step to evaluate, or all")
    p.add_argument("--output", "-o", type=Path, help="the output report JSON")
    p.add_argument("--split", type=str, default="test", choices=sgg.world.SPLITS, help="the split to evaluate")
    p.add_argument("--top-m", type=int, help="the number of predicates per subject-object pair")
    args = p.parse_args(argv)

    if args.top_m is not None and args.top_m < 1:
        p.error("--top-m must be positive")
    manifest = sgg.dataset.load_manifest(args.data)

    if args.freq_prior:
        if args.config is None and args.ckpt is None:
            p.error("--freq-prior needs --config or --ckpt")
        config = sgg.config.load_config(args.config or args.ckpt)
        reports = [sgg.training.freq_prior_report(config, manifest, args.split, args.top_m, args.k)]
    else:
        if args.ckpt is None:
            p.error("--ckpt is required unless --freq-prior is given")
        print(f"Loading {args.ckpt}...", file=sys.stderr)
        model, config, _ = sgg.training.load_model(args.ckpt, args.device)
        steps = None if args.layer == "all" else [args.layer]
        reports = sgg.training.evaluate_model(model, config, manifest, args.split, steps, args.top_m, args.k,
                                              args.device)

    print(sgg.evaluation.format_table(reports))
    if args.layer == "all" and len(reports) > 1:
        k = reports[0].ks[-1]
        rows = sgg.evaluation.per_class_delta(reports[0], reports[-1], k, manifest.frequency)
        print(f"\nPer-class R@{k}, first vs last step:")
        print(sgg.evaluation.format_class_delta(rows, sgg.world.predicate_names(manifest.world)))

    if args.output:
        obj = {
            "config": config,
            "manifest_hash": manifest.hash,
            "split": args.split,
            "freq_prior": args.freq_prior,
            "reports": [r.to_dict() for r in reports],
        }
        args.output.parent.mkdir(parents=True, exist_ok=True)
        args.output.write_text(json.dumps(obj, indent=2) + "\n")
    return reports


if __name__ == "__main__":
    main()
