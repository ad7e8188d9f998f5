"""Grid encoder: feature grid to a position-aware token sequence."""

from dataclasses import dataclass

import torch
from einops import rearrange
from torch import nn

from .. import layers


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int | None = None
    pos_encoding: str = "sinusoidal-2d"

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError(f"n_layers must be non-negative, got {self.n_layers}")
        if self.d_model % 4:
            raise ValueError(f"d_model must be divisible by 4 for 2D sinusoidal positions, got {self.d_model}")
        if self.pos_encoding != "sinusoidal-2d":
            raise ValueError(f"unsupported position encoding {self.pos_encoding}")
        layers.AttentionSpec(self.d_model, self.n_heads)


def sinusoidal_pos_2d(h, w, d_model, temperature=10000.0, dtype=torch.float32):
    """Fixed 2D sine/cosine position encodings of shape [h * w, d_model]. The
    first half of the features encodes the row, the second half the column."""
    d = d_model // 4
    freqs = temperature ** (-torch.arange(d, dtype=torch.float64) / d)
    y = torch.arange(h, dtype=torch.float64)[:, None] * freqs
    x = torch.arange(w, dtype=torch.float64)[:, None] * freqs
    y = torch.cat([y.sin(), y.cos()], dim=-1)
    x = torch.cat([x.sin(), x.cos()], dim=-1)
    pos = torch.cat([y[:, None, :].expand(h, w, -1), x[None, :, :].expand(h, w, -1)], dim=-1)
    return rearrange(pos, "h w d -> (h w) d").to(dtype)


class EncoderBlock(nn.Module):
    def __init__(self, d_model, n_heads, d_ff):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = layers.MultiHeadAttention(layers.AttentionSpec(d_model, n_heads))
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = layers.FeedForward(d_model, d_ff)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h)
        return x + self.ff(self.norm2(x))


class GridEncoder(nn.Module):
    def __init__(self, channels, grid_h, grid_w, cfg):
        super().__init__()
        self.channels = channels
        self.grid_h, self.grid_w = grid_h, grid_w
        self.cfg = cfg
        d_ff = cfg.d_ff or 4 * cfg.d_model
        self.in_proj = nn.Linear(channels, cfg.d_model)
        self.register_buffer("pos", sinusoidal_pos_2d(grid_h, grid_w, cfg.d_model), persistent=False)
        self.blocks = nn.ModuleList(EncoderBlock(cfg.d_model, cfg.n_heads, d_ff) for _ in range(cfg.n_layers))
        self.out_norm = nn.LayerNorm(cfg.d_model) if cfg.n_layers else nn.Identity()

    def embed_grid(self, grid):
        """Per-cell projection plus position encoding: [B, c, h, w] -> [B, h * w, d]."""
        if grid.shape[-3:] != (self.channels, self.grid_h, self.grid_w):
            raise ValueError(
                f"grid shape {tuple(grid.shape[-3:])} does not match ({self.channels}, {self.grid_h}, {self.grid_w})"
            )
        x = rearrange(grid, "... c h w -> ... (h w) c")
        return self.in_proj(x) + self.pos.to(x.dtype)

    def encode(self, x):
        for block in self.blocks:
            x = block(x)
        return self.out_norm(x)

    def forward(self, grid):
        return self.encode(self.embed_grid(grid))
