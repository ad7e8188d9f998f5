"""Bipartite matching of predicted triplet slots to padded ground truth."""

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import boxes
from .models.triple_decoder import DECODERS


def hungarian(cost):
    """Exact minimum-cost assignment of every row to a distinct column.

    O(n^2 m) shortest augmenting paths with row and column potentials.

    Args:
        cost (array-like): [n, m] finite costs with n <= m.

    Returns:
        np.ndarray: [n] column assigned to each row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] > cost.shape[1]:
        raise ValueError(f"cost matrix must be 2D with no more rows than columns, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row assigned to column j, 1-based
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, math.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = math.inf, 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            assignment[p[j] - 1] = j - 1
    return assignment


@dataclass(frozen=True)
class Assignment:
    """sigma[i] is the prediction slot matched to target row i."""

    sigma: tuple

    def __post_init__(self):
        if sorted(self.sigma) != list(range(len(self.sigma))):
            raise ValueError(f"assignment {self.sigma} is not a permutation")

    def __len__(self):
        return len(self.sigma)

    def inverse(self):
        out = [0] * len(self.sigma)
        for i, j in enumerate(self.sigma):
            out[j] = i
        return tuple(out)

    def cost(self, matrix):
        """Total cost of the assignment under an [n, n] or [T, n, n] cost."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim == 3:
            matrix = matrix.sum(0)
        return float(sum(matrix[i, j] for i, j in enumerate(self.sigma)))


@dataclass
class PaddedTargets:
    """n target slots: the scene's triplets followed by empty slots.

    Empty slots carry the empty class (eta for entities, upsilon for
    predicates) and zero boxes that never enter a loss.
    """

    labels: dict
    boxes: dict
    num_gt: int

    @property
    def num_slots(self):
        return self.labels["s"].shape[0]

    @classmethod
    def from_item(cls, item, n, eta, upsilon):
        """Builds targets from a SceneDataset item."""
        rel = item["relations"]
        num_gt = rel.shape[0]
        if num_gt > n:
            raise ValueError(f"scene {item['scene_id']} has {num_gt} triplets but only {n} query slots")
        s_boxes, o_boxes = item["boxes"][rel[:, 0]], item["boxes"][rel[:, 1]]
        gt_labels = {"s": item["labels"][rel[:, 0]], "o": item["labels"][rel[:, 1]], "p": rel[:, 2]}
        gt_boxes = {"s": s_boxes, "o": o_boxes, "p": boxes.predicate_boxes(s_boxes, o_boxes)}
        empty = {"s": eta, "o": eta, "p": upsilon}
        labels = {x: torch.cat([gt_labels[x], gt_labels[x].new_full((n - num_gt,), empty[x])]) for x in DECODERS}
        padded = {x: torch.cat([gt_boxes[x], gt_boxes[x].new_zeros(n - num_gt, 4)]) for x in DECODERS}
        return cls(labels, padded, num_gt)

    def permuted(self, order):
        """Targets with GT rows reordered; ``order`` permutes the first num_gt rows."""
        index = torch.cat([torch.as_tensor(order, dtype=torch.long), torch.arange(self.num_gt, self.num_slots)])
        return PaddedTargets(
            {x: v[index] for x, v in self.labels.items()}, {x: v[index] for x, v in self.boxes.items()}, self.num_gt
        )


def rel_cost(target, hyp, l1_coef=5.0, giou_coef=2.0):
    """Pair-wise relation cost of one Triplet (or None for an empty slot)
    against one TripletHypothesis."""
    if target is None:
        return 0.0
    total = 0.0
    pairs = (
        (hyp.s_dist, hyp.s_box, target.subject.class_id, target.subject.box),
        (hyp.o_dist, hyp.o_box, target.object.class_id, target.object.box),
        (hyp.p_dist, hyp.p_box, target.predicate_class, target.predicate_box),
    )
    for dist, box, class_id, target_box in pairs:
        l1 = sum(abs(a - b) for a, b in zip(box.to_list(), target_box.to_list()))
        total += float(dist[class_id]) - (l1_coef * l1 + giou_coef * (1 - boxes.giou(box, target_box)))
    return -total


@torch.no_grad()
def cost_matrices(targets, preds, l1_coef=5.0, giou_coef=2.0):
    """Per-layer relation costs of one scene: [T, n targets, n slots].

    Rows of empty target slots are zero.
    """
    n, g = preds.num_queries, targets.num_gt
    cost = torch.zeros(preds.num_layers, n, n, dtype=torch.float64)
    if g == 0:
        return cost
    for x in DECODERS:
        probs = preds.probs(x)[:, 0].double()
        pred_boxes = preds.boxes[x][:, 0].double()
        tgt_boxes = targets.boxes[x][:g].double()
        class_cost = -probs[..., targets.labels[x][:g]]
        l1 = (pred_boxes[:, :, None, :] - tgt_boxes[None, None, :, :]).abs().sum(-1)
        giou = boxes.pairwise_giou(pred_boxes, tgt_boxes)
        cost[:, :g] += (class_cost + l1_coef * l1 + giou_coef * (1 - giou)).transpose(1, 2)
    return cost


def _solve(cost):
    cost = cost.numpy() if isinstance(cost, torch.Tensor) else cost
    if not np.isfinite(cost).all():
        raise ValueError("non-finite entries in the matching cost")
    return Assignment(tuple(int(j) for j in hungarian(cost)))


def joint_match(targets, preds, l1_coef=5.0, giou_coef=2.0):
    """One assignment minimizing the relation cost summed over all layers."""
    return _solve(cost_matrices(targets, preds, l1_coef, giou_coef).sum(0))


def per_layer_match(targets, preds, l1_coef=5.0, giou_coef=2.0):
    """An independent assignment per layer."""
    return [_solve(c) for c in cost_matrices(targets, preds, l1_coef, giou_coef)]
