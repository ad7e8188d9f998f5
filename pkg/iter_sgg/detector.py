"""A frozen synthetic detector for the two-stage model family.

Detections are the ground-truth shapes with label noise and box jitter.
Region features are the feature grid pooled over a box, with the box appended.
"""

import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class DetectorConfig:
    label_noise: float = 0.1
    box_jitter: float = 0.02
    confidence: float = 0.8

    def __post_init__(self):
        if not 0 <= self.label_noise <= 1:
            raise ValueError(f"label_noise must be in [0, 1], got {self.label_noise}")
        if self.box_jitter < 0:
            raise ValueError(f"box_jitter must be non-negative, got {self.box_jitter}")
        if not 0 < self.confidence <= 1:
            raise ValueError(f"confidence must be in (0, 1], got {self.confidence}")


@dataclass
class DetectorOutput:
    """Detections of one scene, ordered left to right by box center.

    Attributes:
        boxes: [N, 4] center-form boxes.
        labels: [N, eta] label distributions.
        roi_features: [N, c + 4] pooled grid features and box.
        union_features: [N * (N - 1), c + 12] pooled union-box features, both
            boxes and their relative geometry, for every ordered pair.
        pairs: [N * (N - 1), 2] (subject, object) indices, i != j, row-major.
        gt_labels: [N] ground truth class of every detection.
        gt_predicates: [N * (N - 1)] ground truth predicate, upsilon for none.
    """

    boxes: torch.Tensor
    labels: torch.Tensor
    roi_features: torch.Tensor
    union_features: torch.Tensor
    pairs: torch.Tensor
    gt_labels: torch.Tensor
    gt_predicates: torch.Tensor

    def __len__(self):
        return self.boxes.shape[0]


def roi_dim(world):
    return world.channels + 4


def union_dim(world):
    return world.channels + 12


def pool_grid(grid, box):
    """Coverage-weighted mean of grid cells under a center-form box."""
    c, gh, gw = grid.shape
    x1, y1, x2, y2 = box[0] - box[2] / 2, box[1] - box[3] / 2, box[0] + box[2] / 2, box[1] + box[3] / 2
    xs, ys = np.arange(gw) / gw, np.arange(gh) / gh
    ix = np.clip(np.minimum(x2, xs + 1 / gw) - np.maximum(x1, xs), 0, None)
    iy = np.clip(np.minimum(y2, ys + 1 / gh) - np.maximum(y1, ys), 0, None)
    weights = iy[:, None] * ix[None, :]
    total = weights.sum()
    if total <= 0:
        return np.zeros(c)
    return (grid * weights).sum((1, 2)) / total


def _jitter(box, rng, sigma):
    cx, cy, w, h = box
    w = min(1.0, max(0.01, w * math.exp(rng.normal(0, sigma))))
    h = min(1.0, max(0.01, h * math.exp(rng.normal(0, sigma))))
    cx = min(1.0, max(0.0, cx + rng.normal(0, sigma) * w))
    cy = min(1.0, max(0.0, cy + rng.normal(0, sigma) * h))
    return [cx, cy, w, h]


def _union(a, b):
    x1 = min(a[0] - a[2] / 2, b[0] - b[2] / 2)
    y1 = min(a[1] - a[3] / 2, b[1] - b[3] / 2)
    x2 = max(a[0] + a[2] / 2, b[0] + b[2] / 2)
    y2 = max(a[1] + a[3] / 2, b[1] + b[3] / 2)
    return [(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1]


def simulate_detector(grid, graph, world, cfg, seed=0):
    """Runs the synthetic detector on one scene.

    The output is a deterministic function of (scene id, seed), so a scene is
    seen identically in every epoch and at evaluation time.
    """
    rng = np.random.default_rng([seed, zlib.crc32(graph.scene_id.encode())])
    entities = graph.entity_instances
    n = len(entities)
    if n == 0:
        raise ValueError(f"scene {graph.scene_id} has no entities")
    boxes, labels = [], []
    for class_id, box in entities:
        boxes.append(_jitter(box.to_list(), rng, cfg.box_jitter))
        noisy = int(rng.integers(0, world.eta)) if rng.random() < cfg.label_noise else class_id
        dist = np.full(world.eta, (1 - cfg.confidence) / (world.eta - 1))
        dist[noisy] = cfg.confidence
        labels.append(dist)
    order = sorted(range(n), key=lambda i: boxes[i][0])
    rank = {i: k for k, i in enumerate(order)}
    boxes = [boxes[i] for i in order]
    grid = np.asarray(grid, dtype=np.float64)

    roi = [np.concatenate([pool_grid(grid, b), b]) for b in boxes]
    pairs, union = [], []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a, b = boxes[i], boxes[j]
            geometry = [b[0] - a[0], b[1] - a[1], math.log(a[2] / b[2]), math.log(a[3] / b[3])]
            union.append(np.concatenate([pool_grid(grid, _union(a, b)), a, b, geometry]))
            pairs.append((i, j))

    gt_predicates = torch.full((len(pairs),), world.upsilon, dtype=torch.long)
    for s, o, p in graph.relations:
        gt_predicates[pair_index(rank[s], rank[o], n)] = p

    def tensor(x, width):
        return torch.tensor(np.array(x, dtype=np.float32).reshape(-1, width))

    return DetectorOutput(
        boxes=tensor(boxes, 4),
        labels=tensor([labels[i] for i in order], world.eta),
        roi_features=tensor(roi, roi_dim(world)),
        union_features=tensor(union, union_dim(world)),
        pairs=torch.tensor(pairs, dtype=torch.long).reshape(-1, 2),
        gt_labels=torch.tensor([entities[i][0] for i in order], dtype=torch.long),
        gt_predicates=gt_predicates,
    )


def pair_index(i, j, n):
    """Row of the ordered pair (i, j) in a detector's pair list."""
    if i == j:
        raise ValueError("pairs exclude i == j")
    return i * (n - 1) + (j if j < i else j - 1)
