#!/usr/bin/env python3

"""Trains an iterative scene graph generation model."""

import argparse
import json

from pathlib import Path

import iter_sgg as sgg


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", type=str, required=True, help="the configuration file")
    p.add_argument("--data", type=Path, required=True, help="the dataset manifest or directory")
    p.add_argument("--out", type=Path, required=True, help="the output directory")
    p.add_argument("--device", type=str, help="the device to train on")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.add_argument("--seed", type=int, help="override the random seed")
    args = p.parse_args(argv)

    config = sgg.config.load_config(args.config)
    if args.epochs is not None:
        config["training"]["epochs"] = args.epochs
    if args.seed is not None:
        config["training"]["seed"] = args.seed
    sgg.config.validate_config(config)
    manifest = sgg.dataset.load_manifest(args.data)
    if manifest.world != sgg.config.make_world_config(config):
        p.error("the dataset was generated with a different world config")

    summary = sgg.training.fit(config, manifest, args.out, device=args.device)
    print(json.dumps({k: str(v) if isinstance(v, Path) else v for k, v in summary.items()}))
    return summary


if __name__ == "__main__":
    main()
