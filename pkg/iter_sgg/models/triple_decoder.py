"""Three synchronized decoders for subjects, objects and predicates.

Every decoder layer emits a full scene graph estimate. Within a step, the
object and predicate decoders see positional encodings conditioned on the
step's earlier decoder outputs (CWS). Across steps, every decoder's queries
are conditioned on all three decoders' previous outputs (CAS).
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .. import layers
from ..boxes import BBox
from . import flags
from .encoder import GridEncoder

DECODERS = ("s", "o", "p")


class MissingPrerequisiteError(ValueError):
    """A conditioned positional encoding was requested before the decoder
    outputs it depends on."""


@dataclass(frozen=True)
class DecoderConfig:
    n_queries: int = 16
    n_layers: int = 3
    d_model: int = 32
    n_heads: int = 4
    d_ff: int | None = None
    enable_cws: bool = True
    enable_cas: bool = True

    def __post_init__(self):
        if self.n_queries < 1:
            raise ValueError(f"n_queries must be positive, got {self.n_queries}")
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be positive, got {self.n_layers}")
        for name in ("enable_cws", "enable_cas"):
            if not isinstance(getattr(self, name), bool):
                raise ValueError(f"{name} must be a boolean, got {getattr(self, name)!r}")
        layers.AttentionSpec(self.d_model, self.n_heads)


@dataclass(frozen=True)
class TripletHypothesis:
    """One query slot's estimate: class distributions (last class is the empty
    class) and center-form boxes."""

    s_dist: np.ndarray
    o_dist: np.ndarray
    p_dist: np.ndarray
    s_box: BBox
    o_box: BBox
    p_box: BBox

    def to_dict(self):
        return {
            "s_dist": self.s_dist.tolist(),
            "o_dist": self.o_dist.tolist(),
            "p_dist": self.p_dist.tolist(),
            "s_box": self.s_box.to_list(),
            "o_box": self.o_box.to_list(),
            "p_box": self.p_box.to_list(),
        }


@dataclass
class PredictionSet:
    """Per-layer outputs of the three decoders.

    ``logits[x]`` has shape [T, B, n, C_x] and ``boxes[x]`` [T, B, n, 4] for
    x in ("s", "o", "p").
    """

    logits: dict
    boxes: dict

    @property
    def num_layers(self):
        return self.logits["s"].shape[0]

    @property
    def batch_size(self):
        return self.logits["s"].shape[1]

    @property
    def num_queries(self):
        return self.logits["s"].shape[2]

    def probs(self, x):
        return layers.softmax(self.logits[x].float(), -1)

    def layer(self, t):
        """The 1-based layer t as a single-layer PredictionSet."""
        if not 1 <= t <= self.num_layers:
            raise ValueError(f"layer {t} out of range [1, {self.num_layers}]")
        return self._select(slice(t - 1, t), slice(None))

    def scene(self, b):
        return self._select(slice(None), slice(b, b + 1))

    def _select(self, t, b):
        logits = {x: v[t, b] for x, v in self.logits.items()}
        return PredictionSet(logits, {x: v[t, b] for x, v in self.boxes.items()})

    def hypotheses(self, t, b=0):
        """The n TripletHypothesis of scene b at 1-based layer t."""
        one = self.layer(t).scene(b)
        dists = {x: one.probs(x)[0, 0].detach().cpu().double().numpy() for x in DECODERS}
        boxes = {x: one.boxes[x][0, 0].detach().cpu().double().tolist() for x in DECODERS}
        return [
            TripletHypothesis(
                dists["s"][i], dists["o"][i], dists["p"][i],
                BBox.from_list(boxes["s"][i]), BBox.from_list(boxes["o"][i]), BBox.from_list(boxes["p"][i]),
            )
            for i in range(self.num_queries)
        ]


class ConditioningBlock(nn.Module):
    """Residual attention conditioning: x + FFN(MultiHead(q, k, v)). Starts as
    the identity."""

    def __init__(self, d_model, n_heads, d_ff):
        super().__init__()
        self.attn = layers.MultiHeadAttention(layers.AttentionSpec(d_model, n_heads))
        self.ff = layers.FeedForward(d_model, d_ff)
        layers.zero_init(self.ff.down_proj)

    def forward(self, x, q, k, v):
        return x + self.ff(self.attn(q, k, v))


class DecoderLayer(nn.Module):
    """Pre-norm self-attention, cross-attention into Z and feed-forward."""

    def __init__(self, d_model, n_heads, d_ff):
        super().__init__()
        spec = layers.AttentionSpec(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = layers.MultiHeadAttention(spec)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = layers.MultiHeadAttention(spec)
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = layers.FeedForward(d_model, d_ff)

    def forward(self, q, pos, z):
        h = self.norm1(q)
        q = q + self.self_attn(h + pos, h + pos, h)
        q = q + self.cross_attn(self.norm2(q) + pos, z, z)
        return q + self.ff(self.norm3(q))


class PredictionHead(nn.Module):
    """Class logits over n_classes (including the empty class) and a box
    squashed into (0, 1)^4."""

    def __init__(self, d_model, n_classes):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.class_proj = nn.Linear(d_model, n_classes)
        self.box_mlp = layers.MLP(d_model, d_model, 4, 3)

    def forward(self, q):
        h = self.norm(q)
        return self.class_proj(h), self.box_mlp(h).sigmoid()


class IterativeSceneGraphModel(nn.Module):
    stacked_modules = ("layers", "pos_cond", "query_cond")

    def __init__(self, channels, grid_h, grid_w, eta, upsilon, encoder_cfg, cfg):
        super().__init__()
        self.eta, self.upsilon = eta, upsilon
        self.cfg = cfg
        n, d = cfg.n_queries, cfg.d_model
        d_ff = cfg.d_ff or 4 * d
        self.encoder = GridEncoder(channels, grid_h, grid_w, encoder_cfg)
        self.pos = nn.ParameterDict({x: nn.Parameter(torch.randn(n, d)) for x in DECODERS})
        self.layers = nn.ModuleDict(
            {x: nn.ModuleList(DecoderLayer(d, cfg.n_heads, d_ff) for _ in range(cfg.n_layers)) for x in DECODERS}
        )
        if cfg.enable_cws:
            self.pos_cond = nn.ModuleDict(
                {x: nn.ModuleList(ConditioningBlock(d, cfg.n_heads, d_ff) for _ in range(cfg.n_layers)) for x in "op"}
            )
        if cfg.enable_cas:
            self.query_cond = nn.ModuleDict(
                {
                    x: nn.ModuleList(ConditioningBlock(d, cfg.n_heads, d_ff) for _ in range(cfg.n_layers))
                    for x in DECODERS
                }
            )
        self.heads = nn.ModuleDict(
            {"s": PredictionHead(d, eta + 1), "o": PredictionHead(d, eta + 1), "p": PredictionHead(d, upsilon + 1)}
        )

    @property
    def num_steps(self):
        return self.cfg.n_layers

    def n_params_prefix(self, t):
        """Number of parameters used to produce the layer-t estimate."""
        state = prefix_state_dict(dict(self.named_parameters()), t, self.stacked_modules)
        return sum(p.numel() for p in state.values())

    def cond_pos_enc(self, t, decoder_id, pos, q_s=None, q_o=None):
        """The conditioned positional encoding of one decoder at 0-based step t.

        The subject encoding is never conditioned. The object encoding attends
        to the step's subject outputs, the predicate encoding to the subject
        and object outputs concatenated along the query axis.
        """
        if decoder_id == "s":
            return pos["s"]
        if q_s is None:
            raise MissingPrerequisiteError(f"conditioned {decoder_id} positions need this step's subject outputs")
        if decoder_id == "o":
            return self.pos_cond["o"][t](pos["o"], pos["o"], q_s + pos["s"], q_s)
        if q_o is None:
            raise MissingPrerequisiteError("conditioned predicate positions need this step's object outputs")
        keys = torch.cat([q_s + pos["s"], q_o + pos["o"]], dim=-2)
        values = torch.cat([q_s, q_o], dim=-2)
        return self.pos_cond["p"][t](pos["p"], pos["p"], keys, values)

    def cond_queries(self, t, q, pos):
        """Conditions every decoder's queries on all previous-step outputs."""
        keys = torch.cat([q[x] + pos[x] for x in DECODERS], dim=-2)
        values = torch.cat([q[x] for x in DECODERS], dim=-2)
        return {x: self.query_cond[x][t](q[x], q[x] + pos[x], keys, values) for x in DECODERS}

    def decode_layer(self, decoder_id, t, q_hat, pos_hat, z):
        return self.layers[decoder_id][t](q_hat, pos_hat, z)

    def forward(self, grid):
        z = self.encoder(grid)
        batch = z.shape[0]
        pos = {x: self.pos[x].to(z.dtype).expand(batch, -1, -1) for x in DECODERS}
        q = {x: z.new_zeros(batch, self.cfg.n_queries, self.cfg.d_model) for x in DECODERS}
        logits = {x: [] for x in DECODERS}
        boxes = {x: [] for x in DECODERS}
        trace = flags.get_trace()
        for t in range(self.cfg.n_layers):
            q_hat = self.cond_queries(t, q, pos) if self.cfg.enable_cas else q
            pos_hat = {"s": self.cond_pos_enc(t, "s", pos)}
            q_s = self.decode_layer("s", t, q_hat["s"], pos_hat["s"], z)
            pos_hat["o"] = self.cond_pos_enc(t, "o", pos, q_s) if self.cfg.enable_cws else pos["o"]
            q_o = self.decode_layer("o", t, q_hat["o"], pos_hat["o"], z)
            pos_hat["p"] = self.cond_pos_enc(t, "p", pos, q_s, q_o) if self.cfg.enable_cws else pos["p"]
            q_p = self.decode_layer("p", t, q_hat["p"], pos_hat["p"], z)
            q = {"s": q_s, "o": q_o, "p": q_p}
            if trace is not None:
                trace.append({"base": pos, "conditioned": pos_hat})
            for x in DECODERS:
                class_logits, box = self.heads[x](q[x])
                logits[x].append(class_logits)
                boxes[x].append(box)
        logits = {x: torch.stack(v) for x, v in logits.items()}
        return PredictionSet(logits, {x: torch.stack(v) for x, v in boxes.items()})


def prefix_state_dict(state_dict, t, stacked_modules):
    """Drops the entries of per-layer module lists at 0-based layer index t
    or above."""
    out = {}
    for name, value in state_dict.items():
        parts = name.split(".")
        if parts[0] in stacked_modules:
            index = next(int(part) for part in parts if part.isdigit())
            if index >= t:
                continue
        out[name] = value
    return out
