#!/usr/bin/env python3

"""Exports the assembled scene graph of every refinement step as DOT and JSON."""

import argparse
import sys

from pathlib import Path

import torch

import iter_sgg as sgg


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", type=Path, required=True, help="the checkpoint to export from")
    p.add_argument("--data", type=Path, required=True, help="the dataset manifest or directory")
    p.add_argument("--layers", type=str, default="all", help="comma separated refinement steps, or all")
    p.add_argument("--out", type=Path, default=Path("exports"), help="the output directory")
    p.add_argument("--scenes", type=str, required=True, help="comma separated scene ids")
    p.add_argument("--split", type=str, default="test", choices=sgg.world.SPLITS, help="the split holding the scenes")
    p.add_argument("--top-m", type=int, help="the number of predicates per subject-object pair")
    args = p.parse_args(argv)

    manifest = sgg.dataset.load_manifest(args.data)
    model, config, _ = sgg.training.load_model(args.ckpt)
    if config["model"]["type"] != "triple_decoder":
        p.error("graph export needs a triple_decoder checkpoint")
    if args.layers == "all":
        steps = list(range(1, model.num_steps + 1))
    else:
        steps = [int(t) for t in args.layers.split(",") if t]
    for t in steps:
        if not 1 <= t <= model.num_steps:
            raise ValueError(f"layer {t} out of range [1, {model.num_steps}]")
    assembly_cfg = sgg.config.make_assembly_config(config, args.top_m)

    scenes = {graph.scene_id: (grid, graph) for grid, graph in sgg.dataset.load_split(manifest, args.split)}
    wanted = [s for s in args.scenes.split(",") if s]
    for scene_id in wanted:
        if scene_id not in scenes:
            raise KeyError(f"unknown scene id {scene_id!r}")

    entity_names = sgg.world.entity_names(manifest.world)
    predicate_names = sgg.world.predicate_names(manifest.world)
    args.out.mkdir(parents=True, exist_ok=True)
    written = []
    with torch.no_grad():
        for scene_id in wanted:
            grid, _ = scenes[scene_id]
            preds = model(torch.from_numpy(grid.copy())[None])
            for t in steps:
                graph = sgg.assembly.assemble(preds.hypotheses(t, 0), assembly_cfg, step=t)
                stem = args.out / f"{scene_id}_t{t}"
                stem.with_suffix(".dot").write_text(graph.to_dot(entity_names, predicate_names, name=scene_id))
                stem.with_suffix(".json").write_text(graph.to_json(indent=2) + "\n")
                written += [stem.with_suffix(".dot"), stem.with_suffix(".json")]
    print(f"Wrote {len(written)} files to {args.out}", file=sys.stderr)
    return written


if __name__ == "__main__":
    main()
