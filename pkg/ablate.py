#!/usr/bin/env python3

"""Trains and evaluates the variants of an ablation study over several seeds."""

import argparse
import copy
import json
import sys

from pathlib import Path

import numpy as np
from jsonmerge import merge

import iter_sgg as sgg

STUDIES = ("components", "reweight", "queries", "refinement", "motif", "freq-prior")


def study_variants(study, config):
    """(name, config overrides) pairs of a study."""
    if study == "components":
        rows = [
            (False, False, False), (False, False, True), (True, False, True), (False, True, True), (True, True, True)
        ]
        return [
            (f"CAS={int(cas)} CWS={int(cws)} JL={int(jl)}",
             {"model": {"enable_cas": cas, "enable_cws": cws}, "loss": {"joint_loss": jl}})
            for cas, cws, jl in rows
        ]
    if study == "reweight":
        grid = [(0.0, 0.75), (0.07, 0.75), (0.14, 0.75), (0.21, 0.75), (0.14, 0.5), (0.14, 1.0)]
        return [(f"alpha={a} beta={b}", {"loss": {"alpha": a, "beta": b}}) for a, b in grid]
    if study == "queries":
        world = sgg.config.make_world_config(config)
        n = config["model"]["n_queries"]
        out = []
        for factor in (0.5, 1.0, 1.5):
            n_queries = max(world.max_triplets, round(factor * n))
            out.append((f"{factor}x n={n_queries}", {"model": {"n_queries": n_queries}}))
        return out
    if study == "refinement":
        return [("full", {})]
    if study == "motif":
        base = {"model": {"type": "motif", "n_steps": 1, "enable_cas": False}}
        return [("motif", base), ("motif+refine", {"model": {"type": "motif", "n_steps": 3, "enable_cas": True}})]
    raise ValueError(f"unknown study {study!r}")


def parse_seeds(value):
    if "-" in value:
        lo, hi = value.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in value.split(",") if s]


def mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


def format_rows(rows, ks):
    header = ["variant", "step"] + [f"{m}@{k}" for m in ("mR", "R", "hR") for k in ks]
    lines = [header]
    for name, step, reports in rows:
        line = [name, "-" if step is None else str(step)]
        for metric in ("mean_recall", "recall", "harmonic"):
            for k in ks:
                mean, std = mean_std([getattr(r, metric)[k] for r in reports])
                line.append("-" if mean is None else f"{100 * mean:.1f}±{100 * std:.1f}")
        lines.append(line)
    widths = [max(len(x) for x in col) for col in zip(*lines)]
    return "\n".join(" ".join(x.rjust(w) for x, w in zip(line, widths)) for line in lines)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", type=str, required=True, help="the base configuration file")
    p.add_argument("--data", type=Path, required=True, help="the dataset manifest or directory")
    p.add_argument("--device", type=str, help="the device to train on")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.add_argument("--out", type=Path, default=Path("ablations"), help="the output directory")
    p.add_argument("--seeds", type=str, default="0-3", help="seeds, as 0,1,2 or 0-3")
    p.add_argument("--split", type=str, default="test", choices=sgg.world.SPLITS, help="the split to evaluate")
    p.add_argument("--study", type=str, required=True, choices=STUDIES, help="the study to run")
    args = p.parse_args(argv)

    try:
        seeds = parse_seeds(args.seeds)
    except ValueError:
        p.error(f"invalid seed list {args.seeds!r}")
    base = sgg.config.load_config(args.config)
    if args.epochs is not None:
        base["training"]["epochs"] = args.epochs
    manifest = sgg.dataset.load_manifest(args.data)
    ks = base["evaluation"]["ks"]

    rows, records = [], []
    if args.study == "freq-prior":
        report = sgg.training.freq_prior_report(base, manifest, args.split)
        rows.append(("freq prior", None, [report]))
        records.append({"variant": "freq prior", "reports": [report.to_dict()]})
    else:
        for name, overrides in study_variants(args.study, base):
            config = sgg.config.load_config(merge(copy.deepcopy(base), overrides))
            per_step = {}
            for seed in seeds:
                config["training"]["seed"] = seed
                run_dir = args.out / args.study / name.replace(" ", "_").replace("=", "") / f"seed{seed}"
                print(f"{name}, seed {seed}...", file=sys.stderr)
                summary = sgg.training.fit(config, manifest, run_dir, device=args.device)
                model, _, _ = sgg.training.load_model(summary["best"], args.device or "cpu")
                reports = sgg.training.evaluate_model(model, config, manifest, args.split, device=args.device or "cpu")
                steps = reports if args.study in ("refinement", "motif") else reports[-1:]
                for r in steps:
                    per_step.setdefault(r.step, []).append(r)
                records.append({"variant": name, "seed": seed, "reports": [r.to_dict() for r in reports]})
            rows += [(name, t, reports) for t, reports in sorted(per_step.items())]

    print(format_rows(rows, ks))
    args.out.mkdir(parents=True, exist_ok=True)
    out_file = args.out / f"ablation_{args.study}.json"
    out_file.write_text(json.dumps({"config": base, "manifest_hash": manifest.hash, "runs": records}, indent=2) + "\n")
    return rows


if __name__ == "__main__":
    main()
