import json
import warnings
from contextlib import contextmanager
from pathlib import Path

import safetensors
import safetensors.torch as safetorch
import torch
from torch import nn, optim


def n_params(module):
    """Returns the number of trainable parameters in a module."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


@contextmanager
def train_mode(model, mode=True):
    """A context manager that places a model into training mode and restores
    the previous mode on exit."""
    modes = [module.training for module in model.modules()]
    try:
        yield model.train(mode)
    finally:
        for i, module in enumerate(model.modules()):
            module.training = modes[i]


def eval_mode(model):
    """A context manager that places a model into evaluation mode and restores
    the previous mode on exit."""
    return train_mode(model, False)


class StepDecayLR(optim.lr_scheduler.LRScheduler):
    """Implements a step decay learning rate schedule with an optional exponential
    warmup. When last_epoch=-1, sets initial lr as lr. Multiplies the learning
    rate by gamma every step_size steps.
    Args:
        optimizer (Optimizer): Wrapped optimizer.
        step_size (int): The number of steps between decays.
        gamma (float): The factor by which to decay the learning rate. Default: 0.1.
        warmup (float): Exponential warmup factor (0 <= warmup < 1, 0 to disable)
            Default: 0.
        min_lr (float): The minimum learning rate. Default: 0.
        last_epoch (int): The index of last epoch. Default: -1.
    """

    def __init__(self, optimizer, step_size, gamma=0.1, warmup=0.0, min_lr=0.0, last_epoch=-1):
        if step_size < 1:
            raise ValueError(f"step_size must be positive, got {step_size}")
        if not 0.0 <= warmup < 1:
            raise ValueError("Invalid value for warmup")
        self.step_size = step_size
        self.gamma = gamma
        self.warmup = warmup
        self.min_lr = min_lr
        super().__init__(optimizer, last_epoch)

    def get_lr(self):
        if not self._get_lr_called_within_step:
            warnings.warn("To get the last learning rate computed by the scheduler, please use `get_last_lr()`.")
        return self._get_closed_form_lr()

    def _get_closed_form_lr(self):
        warmup = 1 - self.warmup ** (self.last_epoch + 1)
        lr_mult = self.gamma ** (self.last_epoch // self.step_size)
        return [warmup * max(self.min_lr, base_lr * lr_mult) for base_lr in self.base_lrs]


class ConstantLRWithWarmup(StepDecayLR):
    """The step decay schedule without decay, used by the recurrent model family.

    After k steps the learning rate is ``(1 - warmup ** (k + 1))`` times the base
    rate, so ``warmup=0`` keeps it constant from the first step.
    """

    def __init__(self, optimizer, warmup=0.0, last_epoch=-1):
        super().__init__(optimizer, step_size=1, gamma=1.0, warmup=warmup, last_epoch=last_epoch)


def optimizer_step(opt, sched=None, max_norm=None):
    """Clips gradients, applies one optimizer update, advances the schedule and
    clears the gradients. Returns the pre-clip gradient norm (or None)."""
    norm = None
    if max_norm:
        params = [p for group in opt.param_groups for p in group["params"] if p.grad is not None]
        norm = nn.utils.clip_grad_norm_(params, max_norm).item()
    opt.step()
    if sched is not None:
        sched.step()
    opt.zero_grad(set_to_none=True)
    return norm


class JSONLLogger:
    """Appends one JSON record per line; continues an existing file."""

    def __init__(self, filename):
        self.filename = Path(filename)
        self.filename.parent.mkdir(parents=True, exist_ok=True)
        self.file = open(self.filename, "a")

    def write(self, record):
        print(json.dumps(record, sort_keys=True), file=self.file, flush=True)

    def close(self):
        self.file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(filename):
    with open(filename) as f:
        return [json.loads(line) for line in f if line.strip()]


def get_safetensors_metadata(path):
    """Retrieves the metadata from a safetensors file."""
    return safetensors.safe_open(path, "pt").metadata()


def save_checkpoint(path, model, config, dtype=torch.float32, **metadata):
    """Saves a model state with the run config echoed in the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().to(dtype).contiguous().clone() for k, v in model.state_dict().items()}
    meta = {"config": json.dumps(config, indent=4)}
    meta.update({k: json.dumps(v) for k, v in metadata.items()})
    safetorch.save_file(state, path, metadata=meta)
    return path


def load_checkpoint(path):
    """Returns (state_dict, config, metadata) of a checkpoint."""
    metadata = dict(get_safetensors_metadata(path) or {})
    if "config" not in metadata:
        raise ValueError(f"{path} has no config in its metadata")
    config = json.loads(metadata.pop("config"))
    metadata = {k: json.loads(v) for k, v in metadata.items()}
    return safetorch.load_file(path, device="cpu"), config, metadata
