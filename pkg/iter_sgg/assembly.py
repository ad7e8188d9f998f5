"""Turns per-query triplet hypotheses into an entity-level scene graph.

Subject and object boxes of all surviving slots are pooled, suppressed per
class, and every slot endpoint is then grouped onto its best overlapping kept
box. Each slot contributes its top-M predicates as edges.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import boxes
from .boxes import BBox


@dataclass(frozen=True)
class AssemblyConfig:
    nms_iou: float = 0.5
    score_floor: float = 0.05
    top_m: int = 1

    def __post_init__(self):
        if not 0 < self.nms_iou < 1:
            raise ValueError(f"nms_iou must be in (0, 1), got {self.nms_iou}")
        if self.top_m < 1:
            raise ValueError(f"top_m must be at least 1, got {self.top_m}")
        if self.score_floor < 0:
            raise ValueError(f"score_floor must be non-negative, got {self.score_floor}")


@dataclass
class AssembledGraph:
    """Nodes are (class_id, BBox, score); edges (subject node, object node,
    predicate class, score) in descending score order."""

    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    step: int | None = None

    def to_dict(self):
        return {
            "step": self.step,
            "nodes": [{"class": c, "box": b.to_list(), "score": s} for c, b, s in self.nodes],
            "edges": [{"subject": s, "object": o, "predicate": p, "score": sc} for s, o, p, sc in self.edges],
        }

    @classmethod
    def from_dict(cls, d):
        nodes = [(n["class"], BBox.from_list(n["box"]), n["score"]) for n in d["nodes"]]
        edges = [(e["subject"], e["object"], e["predicate"], e["score"]) for e in d["edges"]]
        return cls(nodes, edges, d.get("step"))

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    def to_dot(self, entity_names=None, predicate_names=None, name="scene"):
        """Graphviz source. Nodes read ``class@step``, edges ``predicate score``."""
        step = "" if self.step is None else self.step

        def entity(c):
            return entity_names[c] if entity_names else str(c)

        def predicate(p):
            return predicate_names[p] if predicate_names else str(p)

        lines = [f"digraph {json.dumps(name)} {{"]
        for i, (c, _, _) in enumerate(self.nodes):
            lines.append(f"  n{i} [label={json.dumps(f'{entity(c)}@{step}')}];")
        for s, o, p, score in self.edges:
            lines.append(f"  n{s} -> n{o} [label={json.dumps(f'{predicate(p)} {score:.3f}')}];")
        lines.append("}")
        return "\n".join(lines) + "\n"


def nms_per_class(entries, iou_thr):
    """Greedy non-maximum suppression run independently per class.

    Args:
        entries (list): (class_id, BBox, score) tuples.
        iou_thr (float): a kept box suppresses same-class boxes with a larger IoU.

    Returns:
        list of int: kept indices, ascending.
    """
    for _, _, score in entries:
        if not np.isfinite(score):
            raise ValueError(f"non-finite NMS score {score}")
    order = sorted(range(len(entries)), key=lambda i: (-entries[i][2], i))
    kept = []
    for i in order:
        c, box, _ = entries[i]
        if all(entries[k][0] != c or boxes.iou_or_zero(entries[k][1], box) <= iou_thr for k in kept):
            kept.append(i)
    return sorted(kept)


def assign_entities(entries, nodes):
    """Maps every entry to the same-class node with the largest IoU.

    Ties go to the lowest node index. An entry that overlaps no node of its
    class becomes a new singleton node.

    Returns:
        tuple: (node index per entry, the possibly extended node list).
    """
    nodes = list(nodes)
    out = []
    for c, box, score in entries:
        best, best_iou = None, 0.0
        for k, (node_c, node_box, _) in enumerate(nodes):
            if node_c != c:
                continue
            overlap = boxes.iou_or_zero(node_box, box)
            if overlap > best_iou:
                best, best_iou = k, overlap
        if best is None:
            nodes.append((c, box, score))
            best = len(nodes) - 1
        out.append(best)
    return out, nodes


def top_predicates(p_dist, m):
    """The m most likely non-empty predicate classes, most likely first."""
    probs = np.asarray(p_dist)[:-1]
    order = sorted(range(len(probs)), key=lambda c: (-probs[c], c))
    return order[:m]


def assemble(hyps, cfg=AssemblyConfig(), step=None):
    """Builds the scene graph of one scene from its slot hypotheses."""
    slots = []
    for hyp in hyps:
        s, o, p = int(np.argmax(hyp.s_dist)), int(np.argmax(hyp.o_dist)), int(np.argmax(hyp.p_dist))
        if s == len(hyp.s_dist) - 1 or o == len(hyp.o_dist) - 1 or p == len(hyp.p_dist) - 1:
            continue
        if hyp.s_dist[s] * hyp.o_dist[o] * hyp.p_dist[p] < cfg.score_floor:
            continue
        slots.append((hyp, s, o))
    entries = []
    for hyp, s, o in slots:
        entries.append((s, hyp.s_box, float(hyp.s_dist[s])))
        entries.append((o, hyp.o_box, float(hyp.o_dist[o])))
    kept = nms_per_class(entries, cfg.nms_iou)
    node_of, nodes = assign_entities(entries, [entries[k] for k in kept])

    best = {}
    for k, (hyp, s, o) in enumerate(slots):
        s_node, o_node = node_of[2 * k], node_of[2 * k + 1]
        for p in top_predicates(hyp.p_dist, cfg.top_m):
            score = float(hyp.s_dist[s] * hyp.o_dist[o] * hyp.p_dist[p])
            key = s_node, o_node, p
            best[key] = max(best.get(key, score), score)

    per_pair = {}
    for (s_node, o_node, p), score in best.items():
        per_pair.setdefault((s_node, o_node), []).append((s_node, o_node, p, score))
    edges = []
    for candidates in per_pair.values():
        candidates.sort(key=lambda e: (-e[3], e[2]))
        edges.extend(candidates[: cfg.top_m])
    edges.sort(key=lambda e: (-e[3], e[0], e[1], e[2]))
    return AssembledGraph(nodes, edges, step)
