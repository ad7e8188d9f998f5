import json
from pathlib import Path

from jsonmerge import merge
from torch import optim

from . import criterion, detector, utils
from .assembly import AssemblyConfig
from .models import EncoderConfig, DecoderConfig, IterativeSceneGraphModel, MotifConfig, MotifRefinementModel, flags
from .world import WorldConfig


def load_config(path_or_dict):
    """Loads a run config from a JSON file, a checkpoint or a dict and fills in
    the defaults of its model family."""
    defaults_triple_decoder = {
        "model": {
            "d_model": 32,
            "n_heads": 4,
            "d_ff": None,
            "encoder_layers": 2,
            "n_layers": 3,
            "n_queries": 16,
            "enable_cws": True,
            "enable_cas": True,
        },
    }
    defaults_motif = {
        "model": {
            "d_r": 32,
            "n_heads": 4,
            "d_ff": None,
            "n_steps": 3,
            "enable_cas": True,
        },
    }
    defaults = {
        "dataset": {
            **WorldConfig().to_dict(),
            "n_train": 2000,
            "n_val": 300,
            "n_test": 300,
            "num_workers": 1,
        },
        "loss": {
            "alpha": 0.0,
            "beta": 0.75,
            "joint_loss": True,
            "eos_coef": 0.1,
            "l1_coef": 5.0,
            "giou_coef": 2.0,
            "bg_coef": 0.25,
        },
        "optimizer": {
            "type": "adamw",
            "lr": 1e-3,
            "betas": [0.9, 0.999],
            "eps": 1e-8,
            "weight_decay": 1e-4,
        },
        "lr_sched": {
            "type": "step",
            "step_size": 1700,
            "gamma": 0.1,
            "warmup": 0.0,
        },
        "training": {
            "seed": 0,
            "epochs": 15,
            "batch_size": 12,
            "grad_clip": 0.1,
        },
        "evaluation": {
            "ks": [10, 20, 50],
            "top_m": 1,
            "iou_thr": 0.5,
            "nms_iou": 0.5,
            "score_floor": 0.05,
            "hbt_head": 0.1,
            "hbt_tail": 0.01,
        },
        "detector": {
            "label_noise": 0.1,
            "box_jitter": 0.02,
            "confidence": 0.8,
        },
    }
    if not isinstance(path_or_dict, dict):
        file = Path(path_or_dict)
        if file.suffix == ".safetensors":
            metadata = utils.get_safetensors_metadata(file)
            config = json.loads(metadata["config"])
        else:
            config = json.loads(file.read_text())
    else:
        config = path_or_dict
    model_type = config.get("model", {}).get("type")
    if model_type == "triple_decoder":
        config = merge(defaults_triple_decoder, config)
    elif model_type == "motif":
        config = merge(defaults_motif, config)
    else:
        raise ValueError(f"unsupported model type {model_type}")
    config = merge(defaults, config)
    seed = flags.get_seed_override()
    if seed is not None:
        config["training"]["seed"] = seed
    validate_config(config)
    return config


def validate_config(config):
    """Cross-field checks that the individual dataclasses cannot make."""
    world = make_world_config(config)
    model = config["model"]
    if model["type"] == "triple_decoder" and model["n_queries"] < world.max_triplets:
        raise ValueError(
            f"n_queries {model['n_queries']} is below the {world.max_triplets} triplets a scene can hold"
        )
    for section, key in (("model", "enable_cas"), ("model", "enable_cws"), ("loss", "joint_loss")):
        value = config[section].get(key, False)
        if not isinstance(value, bool):
            raise ValueError(f"{section}.{key} must be a boolean, got {value!r}")
    if not config["evaluation"]["ks"] or min(config["evaluation"]["ks"]) < 1:
        raise ValueError(f"evaluation.ks must be positive, got {config['evaluation']['ks']}")
    for key in ("epochs", "batch_size"):
        if config["training"][key] < (0 if key == "epochs" else 1):
            raise ValueError(f"invalid training.{key} {config['training'][key]}")
    make_assembly_config(config)
    make_detector_config(config)


def make_world_config(config):
    return WorldConfig.from_dict(config["dataset"])


def make_detector_config(config):
    return detector.DetectorConfig(**config["detector"])


def make_assembly_config(config, top_m=None):
    eval_config = config["evaluation"]
    return AssemblyConfig(
        nms_iou=eval_config["nms_iou"],
        score_floor=eval_config["score_floor"],
        top_m=eval_config["top_m"] if top_m is None else top_m,
    )


def make_model(config):
    world = make_world_config(config)
    model_config = config["model"]
    if model_config["type"] == "triple_decoder":
        encoder_cfg = EncoderConfig(
            d_model=model_config["d_model"],
            n_layers=model_config["encoder_layers"],
            n_heads=model_config["n_heads"],
            d_ff=model_config["d_ff"],
        )
        decoder_cfg = DecoderConfig(
            n_queries=model_config["n_queries"],
            n_layers=model_config["n_layers"],
            d_model=model_config["d_model"],
            n_heads=model_config["n_heads"],
            d_ff=model_config["d_ff"],
            enable_cws=model_config["enable_cws"],
            enable_cas=model_config["enable_cas"],
        )
        return IterativeSceneGraphModel(
            world.channels, world.grid_h, world.grid_w, world.eta, world.upsilon, encoder_cfg, decoder_cfg
        )
    if model_config["type"] == "motif":
        motif_cfg = MotifConfig(
            d_r=model_config["d_r"],
            n_steps=model_config["n_steps"],
            n_heads=model_config["n_heads"],
            d_ff=model_config["d_ff"],
            enable_cas=model_config["enable_cas"],
        )
        return MotifRefinementModel(
            detector.roi_dim(world), detector.union_dim(world), world.eta, world.upsilon, motif_cfg
        )
    raise ValueError(f"unsupported model type {model_config['type']}")


def num_steps(config):
    """Number of refinement steps the configured model emits."""
    model_config = config["model"]
    return model_config["n_layers"] if model_config["type"] == "triple_decoder" else model_config["n_steps"]


def with_num_steps(config, t):
    """A copy of the config whose model keeps only the first t steps."""
    config = json.loads(json.dumps(config))
    key = "n_layers" if config["model"]["type"] == "triple_decoder" else "n_steps"
    config["model"][key] = t
    return config


def make_criterion(config, weights):
    world = make_world_config(config)
    loss_config = config["loss"]
    if config["model"]["type"] == "motif":
        return criterion.MotifCriterion(weights, bg_coef=loss_config["bg_coef"])
    return criterion.SetCriterion(
        world.eta,
        world.upsilon,
        weights,
        eos_coef=loss_config["eos_coef"],
        l1_coef=loss_config["l1_coef"],
        giou_coef=loss_config["giou_coef"],
        joint=loss_config["joint_loss"],
    )


def make_optimizer(config, params):
    opt_config = config["optimizer"]
    if opt_config["type"] == "adamw":
        return optim.AdamW(
            params,
            lr=opt_config["lr"],
            betas=tuple(opt_config["betas"]),
            eps=opt_config["eps"],
            weight_decay=opt_config["weight_decay"],
        )
    if opt_config["type"] == "sgd":
        return optim.SGD(
            params,
            lr=opt_config["lr"],
            momentum=opt_config.get("momentum", 0.0),
            nesterov=opt_config.get("nesterov", False),
            weight_decay=opt_config.get("weight_decay", 0.0),
        )
    raise ValueError("Invalid optimizer type")


def make_lr_sched(config, opt):
    sched_config = config["lr_sched"]
    if sched_config["type"] == "step":
        return utils.StepDecayLR(
            opt,
            step_size=sched_config["step_size"],
            gamma=sched_config.get("gamma", 0.1),
            warmup=sched_config.get("warmup", 0.0),
            min_lr=sched_config.get("min_lr", 0.0),
        )
    if sched_config["type"] == "constant":
        return utils.ConstantLRWithWarmup(opt, warmup=sched_config.get("warmup", 0.0))
    raise ValueError("Invalid schedule type")
