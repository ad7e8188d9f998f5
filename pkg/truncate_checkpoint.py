#!/usr/bin/env python3

"""Compresses a checkpoint by keeping only its first refinement steps."""

import argparse
import sys

from pathlib import Path

import torch

import iter_sgg as sgg


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("checkpoint", type=Path, help="the checkpoint to truncate")
    p.add_argument("--keep", type=int, required=True, help="the number of refinement steps to keep")
    p.add_argument("--output", "-o", type=Path, help="the output checkpoint")
    p.add_argument("--dtype", type=str, choices=["fp32", "fp16", "bf16"], default="fp32", help="the output dtype")
    args = p.parse_args(argv)

    if args.keep < 1:
        p.error("--keep must be positive")
    dtype = {"fp32": torch.float32, "fp16": torch.float16, "bf16": torch.bfloat16}[args.dtype]
    output_path = args.output or args.checkpoint.with_name(f"{args.checkpoint.stem}_t{args.keep}.safetensors")
    print(f"Loading checkpoint {args.checkpoint}...", file=sys.stderr)
    path, size = sgg.training.truncate_checkpoint(args.checkpoint, output_path, args.keep, dtype)
    print(f"Saved {path} ({100 * size:.1f}% of the parameters)", file=sys.stderr)
    return path


if __name__ == "__main__":
    main()
