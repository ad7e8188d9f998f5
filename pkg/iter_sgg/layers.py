"""Differentiable building blocks shared by the models and losses."""

from dataclasses import dataclass

import torch
from einops import rearrange
from torch import nn
from torch.nn import functional as F

from . import boxes


def zero_init(layer):
    nn.init.zeros_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"input width {x.shape[-1]} does not match weight shape {tuple(weight.shape)}")
    if bias is not None and bias.shape[-1] != weight.shape[0]:
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match weight shape {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def layernorm(x, weight=None, bias=None, eps=1e-5):
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def softmax(x, dim=-1):
    if not torch.isfinite(x).all():
        raise ValueError("softmax input must be finite")
    return torch.softmax(x, dim)


def cross_entropy(logits, target, weight=None, reduction="mean"):
    """Cross entropy of class logits [..., C] against integer targets [...].

    ``weight`` is an optional per-class weight vector [C]. With
    ``reduction="mean"`` the result is the weighted mean, so uniform weights
    give the plain mean.
    """
    n_classes = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
    if target.numel() and (target.min() < 0 or target.max() >= n_classes):
        raise ValueError(f"target class out of range [0, {n_classes})")
    if weight is not None and weight.shape != (n_classes,):
        raise ValueError(f"class weight shape {tuple(weight.shape)} does not match {n_classes} classes")
    return F.cross_entropy(logits.reshape(-1, n_classes), target.reshape(-1), weight=weight, reduction=reduction)


def l1(a, b):
    """Sum of absolute coordinate differences, averaged over leading dimensions."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().sum(-1).mean()


def giou_loss(a, b):
    """1 - GIoU between matching rows of two center-form box tensors, averaged."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (1 - boxes.elementwise_giou(a, b)).mean()


@dataclass(frozen=True)
class AttentionSpec:
    d_model: int
    n_heads: int

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query, key, value and
    output projections."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.q_proj = nn.Linear(spec.d_model, spec.d_model)
        self.k_proj = nn.Linear(spec.d_model, spec.d_model)
        self.v_proj = nn.Linear(spec.d_model, spec.d_model)
        self.out_proj = nn.Linear(spec.d_model, spec.d_model)

    def extra_repr(self):
        return f"d_model={self.spec.d_model}, n_heads={self.spec.n_heads}"

    def forward(self, q, k, v):
        if k.shape[-2] == 0:
            raise ValueError("attention over an empty key set")
        if k.shape[-2] != v.shape[-2]:
            raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
        e = self.spec.head_dim
        q = rearrange(self.q_proj(q), "... l (h e) -> ... h l e", e=e)
        k = rearrange(self.k_proj(k), "... l (h e) -> ... h l e", e=e)
        v = rearrange(self.v_proj(v), "... l (h e) -> ... h l e", e=e)
        x = F.scaled_dot_product_attention(q, k, v)
        x = rearrange(x, "... h l e -> ... l (h e)")
        return self.out_proj(x)


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ff):
        super().__init__()
        self.up_proj = nn.Linear(d_model, d_ff)
        self.act = nn.GELU()
        self.down_proj = nn.Linear(d_ff, d_model)

    def forward(self, x):
        return self.down_proj(self.act(self.up_proj(x)))


class MLP(nn.Module):
    """A stack of linear layers with GELU between them."""

    def __init__(self, d_in, d_hidden, d_out, n_layers):
        super().__init__()
        dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


def grad_check(fn, params, step=1e-6, max_components=None, floor=1e-5, seed=0):
    """Compares reverse-mode gradients of a scalar function against central
    finite differences.

    Args:
        fn (callable): takes no arguments and returns a scalar tensor computed
            from ``params``. It must be deterministic.
        params (iterable of Tensor): leaf tensors to perturb in place. Use
            float64 for tight tolerances.
        step (float): finite difference step.
        max_components (int): if given, checks at most this many randomly
            chosen components per tensor.
        floor (float): lower bound of the relative error denominator.
        seed (int): seed for choosing components.

    Returns:
        float: the maximum relative error over all checked components.
    """
    params = list(params)
    with torch.enable_grad():
        out = fn()
        if out.numel() != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        if out.requires_grad:
            grads = torch.autograd.grad(out, params, allow_unused=True)
        else:
            grads = [None] * len(params)
    gen = torch.Generator().manual_seed(seed)
    max_err = 0.0
    with torch.no_grad():
        for p, grad in zip(params, grads):
            grad = torch.zeros_like(p) if grad is None else grad
            flat, flat_grad = p.view(-1), grad.reshape(-1)
            indices = torch.arange(flat.numel())
            if max_components is not None and flat.numel() > max_components:
                indices = torch.randperm(flat.numel(), generator=gen)[:max_components]
            for i in indices.tolist():
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = fn().item()
                flat[i] = orig - step
                f_minus = fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * step)
                analytic = flat_grad[i].item()
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
                max_err = max(max_err, err)
    return max_err
