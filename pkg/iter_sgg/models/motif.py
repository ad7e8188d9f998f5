"""A two-stage recurrent scene graph model with iterative refinement.

Detections are contextualized left to right by a bidirectional LSTM, decoded
into labels by an LSTM cell, and paired into predicate representations
``g_ij = W_h c_i * W_b c_j * u_ij``. Every refinement step first conditions
the region and union features on the previous step's entity states and pair
representations, then adds its own outputs to the previous ones.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .. import layers
from ..evaluation import RankedTriplet
from ..boxes import BBox
from .triple_decoder import ConditioningBlock, prefix_state_dict


@dataclass(frozen=True)
class MotifConfig:
    d_r: int = 32
    n_steps: int = 3
    n_heads: int = 4
    d_ff: int | None = None
    enable_cas: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be positive, got {self.n_steps}")
        if not isinstance(self.enable_cas, bool):
            raise ValueError(f"enable_cas must be a boolean, got {self.enable_cas!r}")
        layers.AttentionSpec(self.d_r, self.n_heads)


@dataclass
class RefinementState:
    """Step-t inputs and outputs: z [N, d], u [P, d], h [N, d], g [P, d]."""

    z: torch.Tensor
    u: torch.Tensor
    h: torch.Tensor
    g: torch.Tensor


@dataclass
class MotifOutput:
    """Per-step estimates: entity_logits [T, N, eta], predicate_logits
    [T, P, upsilon + 1] (last class is background), labels [T, N]."""

    entity_logits: torch.Tensor
    predicate_logits: torch.Tensor
    labels: torch.Tensor

    @property
    def num_steps(self):
        return self.entity_logits.shape[0]

    def triplets(self, det, t, top_m=1):
        """Ranked triplets of 1-based step t over all candidate pairs."""
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"step {t} out of range [1, {self.num_steps}]")
        entity_probs = layers.softmax(self.entity_logits[t - 1].detach().double(), -1).cpu()
        labels = entity_probs.argmax(-1).tolist()
        label_probs = entity_probs.max(-1).values.tolist()
        pred_probs = layers.softmax(self.predicate_logits[t - 1].detach().double(), -1)[:, :-1].cpu()
        det_boxes = [BBox.from_list(b) for b in det.boxes.tolist()]
        out = []
        for k, (i, j) in enumerate(det.pairs.tolist()):
            probs = pred_probs[k].tolist()
            for p in sorted(range(len(probs)), key=lambda c: (-probs[c], c))[:top_m]:
                score = label_probs[i] * label_probs[j] * probs[p]
                out.append((k, RankedTriplet(labels[i], p, labels[j], det_boxes[i], det_boxes[j], score)))
        out.sort(key=lambda item: (-item[1].score, item[0]))
        return [x for _, x in out]


class RefinementStep(nn.Module):
    """The recurrent networks of one step, plus the conditioning cascades that
    feed it (absent on the first step)."""

    def __init__(self, d, n_heads, d_ff, conditioned):
        super().__init__()
        self.entity_ctx = nn.LSTM(2 * d, d, batch_first=True, bidirectional=True)
        self.entity_cell = nn.LSTMCell(3 * d, d)
        self.pred_ctx = nn.LSTM(3 * d, d, batch_first=True, bidirectional=True)
        self.w_h = nn.Linear(2 * d, d)
        self.w_b = nn.Linear(2 * d, d)
        if conditioned:
            self.z_cond = nn.ModuleList(ConditioningBlock(d, n_heads, d_ff) for _ in range(3))
            self.u_cond = nn.ModuleList(ConditioningBlock(d, n_heads, d_ff) for _ in range(3))


def _cascade(blocks, x, sources):
    for block, source in zip(blocks, sources):
        if x.shape[0] and source.shape[0]:
            x = block(x[None], x[None], source[None], source[None])[0]
    return x


class MotifRefinementModel(nn.Module):
    stacked_modules = ("steps",)

    def __init__(self, roi_dim, union_dim, eta, upsilon, cfg):
        super().__init__()
        self.eta, self.upsilon = eta, upsilon
        self.cfg = cfg
        d = cfg.d_r
        d_ff = cfg.d_ff or 4 * d
        self.roi_proj = nn.Linear(roi_dim, d)
        self.union_proj = nn.Linear(union_dim, d)
        self.label_embed = nn.Embedding(eta + 1, d)  # row eta is the begin label
        self.steps = nn.ModuleList(
            RefinementStep(d, cfg.n_heads, d_ff, cfg.enable_cas and t > 0) for t in range(cfg.n_steps)
        )
        self.entity_classifier = nn.Linear(d, eta)
        self.predicate_classifier = nn.Linear(d, upsilon + 1)

    @property
    def num_steps(self):
        return self.cfg.n_steps

    def n_params_prefix(self, t):
        state = prefix_state_dict(dict(self.named_parameters()), t, self.stacked_modules)
        return sum(p.numel() for p in state.values())

    def embed_labels(self, labels):
        """Label embeddings of class ids [N] or class distributions [N, eta]."""
        if labels.is_floating_point():
            return labels @ self.label_embed.weight[: self.eta]
        return self.label_embed(labels)

    def entity_context(self, t, z, label_dists):
        """Bidirectional context c^e [N, 2d] over the left-to-right entities."""
        if z.shape[0] == 0:
            raise ValueError("entity context over an empty entity list")
        x = torch.cat([z, self.embed_labels(label_dists)], dim=-1)
        return self.steps[t].entity_ctx(x[None])[0][0]

    def entity_decode(self, t, contexts, h_prev, labels=None):
        """Sequential label decoding. Returns the residual states h^t [N, d]
        and the decoded labels [N].

        Each cell sees the previous entity's label: the given ``labels`` when
        teacher forcing, else the argmax of the previous refined state.
        """
        cell = self.steps[t].entity_cell
        prev = self.label_embed.weight[self.eta]
        state = None
        h_out, decoded = [], []
        for i in range(contexts.shape[0]):
            state = cell(torch.cat([contexts[i], prev])[None], state)
            h_i = h_prev[i] + state[0][0]
            label = labels[i] if labels is not None else self.entity_classifier(h_i).argmax()
            h_out.append(h_i)
            decoded.append(label)
            prev = self.label_embed(label)
        return torch.stack(h_out), torch.stack(decoded)

    def predicate_context_and_score(self, t, c_e, labels, u, pairs, g_prev):
        """Pair representations g^t [P, d] and predicate logits [P, upsilon + 1]."""
        step = self.steps[t]
        c_p = step.pred_ctx(torch.cat([c_e, self.embed_labels(labels)], dim=-1)[None])[0][0]
        g = g_prev + step.w_h(c_p)[pairs[:, 0]] * step.w_b(c_p)[pairs[:, 1]] * u
        return c_p, g, self.predicate_classifier(g)

    def cas_update(self, t, state):
        """Conditions z on h, g, u and u on h, g, z, all from step t - 1."""
        step = self.steps[t]
        z = _cascade(step.z_cond, state.z, (state.h, state.g, state.u))
        u = _cascade(step.u_cond, state.u, (state.h, state.g, state.z))
        return z, u

    def residual_step(self, t, state, label_dists, pairs, labels=None):
        """Runs 0-based step t on the previous state. Returns the new state,
        the entity and predicate logits and the decoded labels."""
        z, u = self.cas_update(t, state) if self.cfg.enable_cas and t > 0 else (state.z, state.u)
        c_e = self.entity_context(t, z, label_dists)
        h, decoded = self.entity_decode(t, c_e, state.h, labels)
        _, g, predicate_logits = self.predicate_context_and_score(t, c_e, decoded, u, pairs, state.g)
        return RefinementState(z, u, h, g), self.entity_classifier(h), predicate_logits, decoded

    def forward(self, det, labels=None):
        """Refines one scene's DetectorOutput. ``labels`` enables teacher forcing."""
        z = self.roi_proj(det.roi_features)
        u = self.union_proj(det.union_features)
        state = RefinementState(z, u, torch.zeros_like(z), torch.zeros_like(u))
        entity_logits, predicate_logits, decoded = [], [], []
        for t in range(self.cfg.n_steps):
            state, e_logits, p_logits, step_labels = self.residual_step(t, state, det.labels, det.pairs, labels)
            entity_logits.append(e_logits)
            predicate_logits.append(p_logits)
            decoded.append(step_labels)
        return MotifOutput(torch.stack(entity_logits), torch.stack(predicate_logits), torch.stack(decoded))
