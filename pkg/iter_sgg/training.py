"""Training and evaluation loops shared by the command line scripts."""

import time
from pathlib import Path

import accelerate
import torch
from torch.utils import data
from tqdm.auto import tqdm

from . import config as sgg_config
from . import criterion, dataset, detector, evaluation, models, utils
from .boxes import BBox


def seed_everything(seed):
    accelerate.utils.set_seed(seed)
    return torch.Generator().manual_seed(seed)


def simulate_split(scenes, world, det_cfg):
    """DetectorOutputs of a split. The detector is frozen: it depends only on
    the world seed and the scene."""
    return [detector.simulate_detector(grid, graph, world, det_cfg, seed=world.seed) for grid, graph in scenes]


def _to_device(det, device):
    return type(det)(**{k: v.to(device) for k, v in vars(det).items()})


def model_sizes(model):
    """Relative parameter count used through each refinement step."""
    total = model.n_params_prefix(model.num_steps)
    return {t: model.n_params_prefix(t) / total for t in range(1, model.num_steps + 1)}


@torch.no_grad()
def predict_results(model, scenes, steps, top_m=1, iou_thr=0.5, detections=None, batch_size=32, device="cpu"):
    """Matches each step's ranked predictions against ground truth.

    Returns:
        dict: 1-based step -> list of SceneResult, one per scene.
    """
    results = {t: [] for t in steps}
    with utils.eval_mode(model):
        if detections is not None:
            for (_, graph), det in zip(scenes, detections):
                out = model(_to_device(det, device))
                for t in steps:
                    preds = out.triplets(det, t, top_m)
                    results[t].append(evaluation.SceneResult.from_predictions(graph, preds, iou_thr))
            return results
        loader = data.DataLoader(
            dataset.SceneDataset(scenes), batch_size, shuffle=False, collate_fn=dataset.collate_scenes
        )
        for grids, batch in loader:
            preds = model(grids.to(device))
            for b, item in enumerate(batch):
                graph = scenes[item["index"]][1]
                for t in steps:
                    ranked = evaluation.ranked_triplets(preds.hypotheses(t, b), top_m)
                    results[t].append(evaluation.SceneResult.from_predictions(graph, ranked, iou_thr))
    return results


def freq_prior_results(manifest, scenes, detections, top_m=1, iou_thr=0.5):
    """Results of the frequency baseline: detector labels, and per pair the
    most frequent training predicates of the class pair."""
    out = []
    for (_, graph), det in zip(scenes, detections):
        labels = det.labels.argmax(-1).tolist()
        conf = det.labels.max(-1).values.tolist()
        det_boxes = [BBox.from_list(b) for b in det.boxes.tolist()]
        ranked = []
        for k, (i, j) in enumerate(det.pairs.tolist()):
            dist = dataset.freq_prior_predict(labels[i], labels[j], manifest.pair_stats)
            for p in sorted(range(len(dist)), key=lambda c: (-dist[c], c))[:top_m]:
                score = conf[i] * conf[j] * float(dist[p])
                ranked.append((k, evaluation.RankedTriplet(labels[i], p, labels[j], det_boxes[i], det_boxes[j], score)))
        ranked.sort(key=lambda item: (-item[1].score, item[0]))
        out.append(evaluation.SceneResult.from_predictions(graph, [x for _, x in ranked], iou_thr))
    return out


def reports_from_results(results, manifest, ks, sizes=None):
    upsilon = manifest.world.upsilon
    return [
        evaluation.evaluate_results(
            results[t], upsilon, manifest.registry, manifest.partition, ks, step=t,
            model_size=None if sizes is None else sizes[t],
        )
        for t in sorted(results)
    ]


def evaluate_model(model, config, manifest, split="test", steps=None, top_m=None, ks=None, device="cpu"):
    """One RecallReport per requested 1-based step (default: every step)."""
    eval_config = config["evaluation"]
    n_steps = model.num_steps
    steps = list(range(1, n_steps + 1)) if steps is None else list(steps)
    for t in steps:
        if not 1 <= t <= n_steps:
            raise ValueError(f"layer {t} out of range [1, {n_steps}]")
    scenes = dataset.load_split(manifest, split)
    detections = None
    if config["model"]["type"] == "motif":
        detections = simulate_split(scenes, manifest.world, sgg_config.make_detector_config(config))
    results = predict_results(
        model, scenes, steps, eval_config["top_m"] if top_m is None else top_m, eval_config["iou_thr"],
        detections, config["training"]["batch_size"], device,
    )
    return reports_from_results(results, manifest, ks or eval_config["ks"], model_sizes(model))


def _mean_breakdown(records):
    out = {}
    for record in records:
        for key, value in record.items():
            out[key] = out.get(key, 0.0) + float(value) / len(records)
    return out


def fit(config, manifest, out_dir, progress=True, device=None):
    """Trains one model and keeps the checkpoint with the best validation hR
    at the largest K, measured at the last refinement step.

    Returns:
        dict: paths of the best and last checkpoints, the final epoch's mean
            loss and the best validation metric.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_config = config["training"]
    gen = seed_everything(train_config["seed"])
    device = torch.device(device or ("cuda" if torch.cuda.is_available() else "cpu"))

    world = manifest.world
    weights = criterion.class_weights(manifest.frequency, config["loss"]["alpha"], config["loss"]["beta"])
    model = sgg_config.make_model(config).to(device)
    crit = sgg_config.make_criterion(config, weights)
    opt = sgg_config.make_optimizer(config, model.parameters())
    sched = sgg_config.make_lr_sched(config, opt)
    if progress:
        tqdm.write(f"Parameters: {utils.n_params(model):,}")
        tqdm.write(f"Manifest: {manifest.hash}")

    train_scenes = dataset.load_split(manifest, "train")
    val_scenes = dataset.load_split(manifest, "val")
    motif = config["model"]["type"] == "motif"
    train_dets = val_dets = None
    if motif:
        det_cfg = sgg_config.make_detector_config(config)
        train_dets = simulate_split(train_scenes, world, det_cfg)
        val_dets = simulate_split(val_scenes, world, det_cfg)
    train_dl = data.DataLoader(
        dataset.SceneDataset(train_scenes),
        train_config["batch_size"],
        shuffle=True,
        collate_fn=dataset.collate_scenes,
        generator=gen,
    )

    ks = config["evaluation"]["ks"]
    best_path, last_path = out_dir / "model_best.safetensors", out_dir / "model_last.safetensors"
    meta = {"manifest_hash": manifest.hash}
    logger = utils.JSONLLogger(out_dir / "train_log.jsonl")
    logger.write({"type": "header", "config": config, "manifest_hash": manifest.hash, "weights": weights.to_dict()})
    utils.save_checkpoint(last_path, model, config, epoch=0, **meta)
    utils.save_checkpoint(best_path, model, config, epoch=0, **meta)
    best_metric, final_loss = None, None
    start = time.time()

    try:
        for epoch in range(1, train_config["epochs"] + 1):
            records = []
            model.train()
            for grids, batch in tqdm(train_dl, desc=f"epoch {epoch}", smoothing=0.1, disable=not progress):
                if motif:
                    dets = [_to_device(train_dets[item["index"]], device) for item in batch]
                    outputs = [model(det, labels=det.gt_labels) for det in dets]
                    losses = crit(outputs, dets)
                else:
                    preds = model(grids.to(device))
                    losses = crit(preds, [{k: _move(v, device) for k, v in item.items()} for item in batch])
                total = losses.total
                if not torch.isfinite(total):
                    raise criterion.NonFiniteLossError(f"non-finite total loss {total.item()} in epoch {epoch}")
                total.backward()
                utils.optimizer_step(opt, sched, train_config["grad_clip"])
                records.append({f"{t}/{x}/{term}": v.item() for (t, x, term), v in losses.terms.items()})
                records[-1]["total"] = total.item()
            final_loss = _mean_breakdown(records)["total"] if records else None

            results = predict_results(
                model, val_scenes, range(1, model.num_steps + 1), config["evaluation"]["top_m"],
                config["evaluation"]["iou_thr"], val_dets, train_config["batch_size"], device,
            )
            reports = reports_from_results(results, manifest, ks, model_sizes(model))
            metric = reports[-1].harmonic[max(ks)]
            logger.write({
                "type": "epoch",
                "epoch": epoch,
                "loss": _mean_breakdown(records),
                "lr": sched.get_last_lr()[0],
                "val": [r.to_dict() for r in reports],
                "elapsed": time.time() - start,
            })
            if progress:
                tqdm.write(f"Epoch: {epoch}, loss: {final_loss:g}, val hR@{max(ks)}: {100 * metric:.2f}")
            utils.save_checkpoint(last_path, model, config, epoch=epoch, **meta)
            if best_metric is None or metric > best_metric:
                best_metric = metric
                utils.save_checkpoint(best_path, model, config, epoch=epoch, val_metric=metric, **meta)
    finally:
        logger.close()
    return {"best": best_path, "last": last_path, "final_loss": final_loss, "best_metric": best_metric}


def _move(value, device):
    return value.to(device) if isinstance(value, torch.Tensor) else value


def load_model(path, device="cpu"):
    """Rebuilds a model from a checkpoint. Returns (model, config, metadata)."""
    state, config, metadata = utils.load_checkpoint(path)
    config = sgg_config.load_config(config)
    model = sgg_config.make_model(config)
    model.load_state_dict(state)
    return model.to(device).eval(), config, metadata


def freq_prior_report(config, manifest, split="test", top_m=None, ks=None):
    eval_config = config["evaluation"]
    scenes = dataset.load_split(manifest, split)
    dets = simulate_split(scenes, manifest.world, sgg_config.make_detector_config(config))
    results = freq_prior_results(manifest, scenes, dets, eval_config["top_m"] if top_m is None else top_m,
                                 eval_config["iou_thr"])
    return evaluation.evaluate_results(results, manifest.world.upsilon, manifest.registry, manifest.partition,
                                       ks or eval_config["ks"])



def truncate_checkpoint(src, dst, t, dtype=torch.float32):
    """Writes a checkpoint of the model made of the first t refinement steps.

    Returns:
        tuple: (output path, relative parameter count of the truncated model).
    """
    state, config, metadata = utils.load_checkpoint(src)
    config = sgg_config.load_config(config)
    full = sgg_config.make_model(config)
    if not 1 <= t <= full.num_steps:
        raise ValueError(f"cannot keep {t} of {full.num_steps} refinement steps")
    state = models.prefix_state_dict(state, t, full.stacked_modules)
    config = sgg_config.with_num_steps(config, t)
    model = sgg_config.make_model(config)
    model.load_state_dict(state)
    size = model.n_params_prefix(t) / full.n_params_prefix(full.num_steps)
    metadata.update(truncated_from=str(src), model_size=size)
    utils.save_checkpoint(dst, model, config, dtype=dtype, **metadata)
    return Path(dst), size
