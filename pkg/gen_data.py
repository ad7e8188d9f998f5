#!/usr/bin/env python3

"""Generates a synthetic shapes-world scene graph dataset."""

import argparse
import sys

from pathlib import Path

import iter_sgg as sgg


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", type=str, required=True, help="the configuration file")
    p.add_argument("--out", type=Path, required=True, help="the output dataset directory")
    p.add_argument("--num-workers", type=int, help="override the number of generation processes")
    args = p.parse_args(argv)

    config = sgg.config.load_config(args.config)
    dataset_config = config["dataset"]
    eval_config = config["evaluation"]
    world = sgg.config.make_world_config(config)
    num_workers = dataset_config["num_workers"] if args.num_workers is None else args.num_workers
    if num_workers < 1:
        p.error("--num-workers must be positive")

    print(f"Generating {args.out}...", file=sys.stderr)
    manifest = sgg.dataset.build_dataset(
        world,
        dataset_config["n_train"],
        dataset_config["n_val"],
        dataset_config["n_test"],
        args.out,
        num_workers=num_workers,
        hbt=(eval_config["hbt_head"], eval_config["hbt_tail"]),
    )
    for split, entry in manifest.splits.items():
        print(f"{split}: {entry['n']} scenes", file=sys.stderr)
    print(f"Manifest hash: {manifest.hash}")
    return args.out / "manifest.json"


if __name__ == "__main__":
    main()
