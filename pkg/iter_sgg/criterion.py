"""Training losses.

The set criterion matches ground truth to query slots once per scene, then
scores every decoder layer against the same matched targets. Predicate class
terms are re-weighted towards rare classes with
``w_c = max((alpha / f_c) ** beta, 1)``.
"""

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from . import boxes, layers
from .matching import PaddedTargets, joint_match, per_layer_match
from .models.triple_decoder import DECODERS


class NonFiniteLossError(ValueError):
    """A loss term is not finite. Carries the first offending slot."""

    def __init__(self, message, layer=None, component=None, scene=None, slot=None):
        super().__init__(f"{message} (layer={layer}, component={component}, scene={scene}, slot={slot})")
        self.layer, self.component, self.scene, self.slot = layer, component, scene, slot


@dataclass(frozen=True)
class ClassWeights:
    """Per-predicate-class loss weights."""

    w: tuple
    alpha: float = 0.0
    beta: float = 0.0

    @classmethod
    def uniform(cls, upsilon):
        return cls((1.0,) * upsilon)

    def __len__(self):
        return len(self.w)

    def to_dict(self):
        return {"alpha": self.alpha, "beta": self.beta, "w": [x if math.isfinite(x) else None for x in self.w]}


def class_weights(freq, alpha, beta):
    """Weights from training fractions f_c. A class never seen in training
    gets an infinite weight when alpha > 0, which is an error only if the
    class shows up in a loss target."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if alpha > 0 and beta <= 0:
        raise ValueError(f"beta must be positive when alpha > 0, got {beta}")
    w = []
    for f in freq.fractions:
        if alpha == 0:
            w.append(1.0)
        elif f == 0:
            w.append(math.inf)
        else:
            w.append(max((alpha / f) ** beta, 1.0))
    return ClassWeights(tuple(w), float(alpha), float(beta))


@dataclass
class LossBreakdown:
    """Scalar loss terms keyed by (layer, component, term) with 1-based layers."""

    terms: dict = field(default_factory=dict)
    coefs: dict = field(default_factory=lambda: {"class": 1.0, "l1": 5.0, "giou": 2.0})

    @property
    def total(self):
        return sum(self.coefs[term] * value for (_, _, term), value in self.terms.items())

    @property
    def num_layers(self):
        return max((t for t, _, _ in self.terms), default=0)

    def layer_total(self, t):
        return sum(self.coefs[term] * v for (u, _, term), v in self.terms.items() if u == t)

    def to_dict(self):
        out = {"total": float(self.total), "layers": {}}
        for (t, x, term), value in sorted(self.terms.items()):
            out["layers"].setdefault(str(t), {}).setdefault(x, {})[term] = float(value)
        return out


def _aligned_targets(target, assignment):
    """Per-slot target labels and boxes, and the mask of matched GT slots."""
    inv = torch.as_tensor(assignment.inverse(), dtype=torch.long)
    labels = {x: target.labels[x][inv] for x in DECODERS}
    slot_boxes = {x: target.boxes[x][inv] for x in DECODERS}
    return labels, slot_boxes, inv < target.num_gt


def _first_bad(values):
    index = (~torch.isfinite(values)).nonzero()[0].tolist()
    return index if len(index) > 1 else index[0]


def layer_losses(targets, preds, assignments, weights, eos_coef=0.1, l1_coef=5.0, giou_coef=2.0):
    """Losses of every layer of a batch under fixed assignments.

    The class term of each component is the weighted mean over all slots of the
    batch, sum(w * nll) / sum(w), where empty slots weigh ``eos_coef`` and
    predicate slots their class weight. The box terms are summed over matched
    slots and divided by the number of ground truth triplets in the batch.

    Args:
        targets (list of PaddedTargets): one per scene.
        preds (PredictionSet): [T, B, n, C] outputs.
        assignments (list): per scene, an Assignment shared by all layers or a
            list of T per-layer Assignments.
        weights (ClassWeights): predicate class weights.
        eos_coef (float): weight of slots that target the empty class.

    Returns:
        LossBreakdown: class, l1 and giou terms per (layer, component).
    """
    if len(targets) != preds.batch_size or len(assignments) != preds.batch_size:
        raise ValueError("need one target and one assignment per scene")
    if len(weights) != preds.logits["p"].shape[-1] - 1:
        raise ValueError(f"{len(weights)} class weights for {preds.logits['p'].shape[-1] - 1} predicate classes")
    num_gt = max(sum(t.num_gt for t in targets), 1)
    out = LossBreakdown(coefs={"class": 1.0, "l1": l1_coef, "giou": giou_coef})
    for t in range(preds.num_layers):
        aligned = [
            _aligned_targets(tgt, a[t] if isinstance(a, (list, tuple)) else a) for tgt, a in zip(targets, assignments)
        ]
        mask = torch.stack([m for _, _, m in aligned])
        for x in DECODERS:
            logits = preds.logits[x][t]
            n_classes = logits.shape[-1]
            target = torch.stack([labels[x] for labels, _, _ in aligned]).to(logits.device)
            class_w = [1.0] * (n_classes - 1) if x != "p" else list(weights.w)
            class_w = logits.new_tensor(class_w + [eos_coef])
            bad_weight = ~torch.isfinite(class_w[target])
            if bad_weight.any():
                scene, slot = bad_weight.nonzero()[0].tolist()
                raise NonFiniteLossError(
                    f"predicate class {int(target[scene, slot])} has no training frequency", t + 1, x, scene, slot
                )
            class_loss = layers.cross_entropy(logits, target, weight=class_w)
            if not torch.isfinite(class_loss):
                nll = layers.cross_entropy(logits, target, reduction="none").reshape(target.shape)
                scene, slot = _first_bad(nll)
                raise NonFiniteLossError(f"non-finite {x} class loss", t + 1, x, scene, slot)

            pred_boxes = preds.boxes[x][t][mask.to(logits.device)]
            tgt_boxes = torch.cat([b[x][m] for _, b, m in aligned]).to(pred_boxes)
            l1 = (pred_boxes - tgt_boxes).abs().sum(-1)
            giou = 1 - boxes.elementwise_giou(pred_boxes, tgt_boxes)
            for term, value in (("l1", l1), ("giou", giou)):
                if not torch.isfinite(value).all():
                    row = _first_bad(value)
                    scene, slot = mask.nonzero()[row].tolist()
                    raise NonFiniteLossError(f"non-finite {x} {term} loss", t + 1, x, scene, slot)
            out.terms[t + 1, x, "class"] = class_loss
            out.terms[t + 1, x, "l1"] = l1.sum() / num_gt
            out.terms[t + 1, x, "giou"] = giou.sum() / num_gt
    return out


class SetCriterion(nn.Module):
    """Matches each scene's padded ground truth to the query slots, then
    computes per-layer losses.

    With ``joint`` one assignment minimizes the cost summed over all layers.
    Otherwise every layer is matched on its own.
    """

    def __init__(self, eta, upsilon, weights, eos_coef=0.1, l1_coef=5.0, giou_coef=2.0, joint=True):
        super().__init__()
        if not isinstance(joint, bool):
            raise ValueError(f"joint must be a boolean, got {joint!r}")
        self.eta, self.upsilon = eta, upsilon
        self.weights = weights
        self.eos_coef, self.l1_coef, self.giou_coef = eos_coef, l1_coef, giou_coef
        self.joint = joint

    def extra_repr(self):
        return f"eos_coef={self.eos_coef}, l1_coef={self.l1_coef}, giou_coef={self.giou_coef}, joint={self.joint}"

    def targets(self, batch, n):
        return [PaddedTargets.from_item(item, n, self.eta, self.upsilon) for item in batch]

    def match(self, targets, preds):
        match_fn = joint_match if self.joint else per_layer_match
        detached = type(preds)(
            {x: v.detach().cpu() for x, v in preds.logits.items()},
            {x: v.detach().cpu() for x, v in preds.boxes.items()},
        )
        return [match_fn(tgt, detached.scene(b), self.l1_coef, self.giou_coef) for b, tgt in enumerate(targets)]

    def forward(self, preds, batch):
        targets = self.targets(batch, preds.num_queries)
        assignments = self.match(targets, preds)
        return layer_losses(
            targets, preds, assignments, self.weights, self.eos_coef, self.l1_coef, self.giou_coef
        )


class MotifCriterion(nn.Module):
    """Per-step losses of the two-stage model: entity cross entropy plus
    re-weighted predicate cross entropy over candidate pairs, with background
    pairs down-weighted by ``bg_coef``."""

    def __init__(self, weights, bg_coef=0.25):
        super().__init__()
        if bg_coef < 0:
            raise ValueError(f"bg_coef must be non-negative, got {bg_coef}")
        self.weights = weights
        self.bg_coef = bg_coef

    def forward(self, outputs, detections):
        out = LossBreakdown(coefs={"class": 1.0})
        for scene, (output, det) in enumerate(zip(outputs, detections)):
            pred_w = output.predicate_logits.new_tensor(list(self.weights.w) + [self.bg_coef])
            bad = ~torch.isfinite(pred_w[det.gt_predicates])
            if bad.any():
                slot = int(bad.nonzero()[0])
                raise NonFiniteLossError(
                    f"predicate class {int(det.gt_predicates[slot])} has no training frequency", None, "p", scene, slot
                )
            for t in range(output.num_steps):
                entity = layers.cross_entropy(output.entity_logits[t], det.gt_labels)
                if det.gt_predicates.numel():
                    predicate = layers.cross_entropy(output.predicate_logits[t], det.gt_predicates, weight=pred_w)
                else:
                    predicate = output.predicate_logits.new_zeros(())
                for x, value in (("e", entity), ("p", predicate)):
                    if not torch.isfinite(value):
                        raise NonFiniteLossError(f"non-finite {x} class loss", t + 1, x, scene)
                    key = (t + 1, x, "class")
                    out.terms[key] = out.terms.get(key, 0) + value / len(outputs)
        return out
