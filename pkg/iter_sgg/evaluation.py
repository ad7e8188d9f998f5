"""Recall metrics over ranked triplet predictions.

A prediction matches a ground truth triplet when the (subject, predicate,
object) classes agree and both entity boxes overlap with IoU >= 0.5.
Matching is greedy in prediction rank order, so the matches within the top K
predictions do not depend on anything ranked below K.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import boxes
from .boxes import BBox


@dataclass(frozen=True)
class RankedTriplet:
    s_class: int
    p_class: int
    o_class: int
    s_box: BBox
    o_box: BBox
    score: float

    @property
    def classes(self):
        return self.s_class, self.p_class, self.o_class


def _argmax_real(dist):
    """Most likely class other than the trailing empty class."""
    return int(np.argmax(np.asarray(dist)[:-1]))


def ranked_triplets(hyps, top_m=1):
    """Ranks the raw slot hypotheses of one scene.

    Every slot yields its top_m non-empty predicates with its most likely
    non-empty subject and object classes, scored by the product of the three
    class probabilities.
    """
    out = []
    for i, hyp in enumerate(hyps):
        s, o = _argmax_real(hyp.s_dist), _argmax_real(hyp.o_dist)
        p_probs = np.asarray(hyp.p_dist)[:-1]
        for p in sorted(range(len(p_probs)), key=lambda c: (-p_probs[c], c))[:top_m]:
            score = float(hyp.s_dist[s] * hyp.o_dist[o] * p_probs[p])
            out.append((i, RankedTriplet(s, p, o, hyp.s_box, hyp.o_box, score)))
    out.sort(key=lambda item: (-item[1].score, item[0]))
    return [t for _, t in out]


def graph_triplets(graph):
    """Ranked triplets of an AssembledGraph's edges."""
    out = []
    for s, o, p, score in graph.edges:
        (s_class, s_box, _), (o_class, o_box, _) = graph.nodes[s], graph.nodes[o]
        out.append(RankedTriplet(s_class, p, o_class, s_box, o_box, score))
    return out


def match_triplets(gt, preds, iou_thr=0.5):
    """Greedy matching of ranked predictions to the triplets of a SceneGraph.

    Returns:
        list: per ground truth triplet, the rank of the prediction that
            matched it, or None.
    """
    ranks = [None] * len(gt.triplets)
    for rank, pred in enumerate(preds):
        for i, t in enumerate(gt.triplets):
            if ranks[i] is not None or t.classes != pred.classes:
                continue
            if boxes.iou_or_zero(pred.s_box, t.subject.box) < iou_thr:
                continue
            if boxes.iou_or_zero(pred.o_box, t.object.box) < iou_thr:
                continue
            ranks[i] = rank
            break
    return ranks


@dataclass(frozen=True)
class SceneResult:
    """Ground truth class triples of one scene and the rank that matched each."""

    scene_id: str
    gt_classes: tuple
    match_ranks: tuple

    @classmethod
    def from_predictions(cls, gt, preds, iou_thr=0.5):
        return cls(gt.scene_id, tuple(t.classes for t in gt.triplets), tuple(match_triplets(gt, preds, iou_thr)))

    def matched(self, k):
        return [r is not None and r < k for r in self.match_ranks]


def recall_at_k(results, k):
    """Mean over scenes with ground truth of the matched fraction in the top k."""
    values = [sum(r.matched(k)) / len(r.gt_classes) for r in results if r.gt_classes]
    if not values:
        raise ValueError("no ground truth")
    return sum(values) / len(values)


def per_class_recall(results, k, upsilon):
    """Per predicate class: recall within each scene containing the class,
    averaged over those scenes. None for classes absent from the ground truth."""
    sums, counts = [0.0] * upsilon, [0] * upsilon
    for r in results:
        hits = r.matched(k)
        per_scene = {}
        for (_, p, _), hit in zip(r.gt_classes, hits):
            matched, total = per_scene.get(p, (0, 0))
            per_scene[p] = matched + hit, total + 1
        for p, (matched, total) in per_scene.items():
            sums[p] += matched / total
            counts[p] += 1
    return [s / c if c else None for s, c in zip(sums, counts)]


def mean_recall_at_k(results, k, upsilon):
    """Returns (mR, per-class recall list)."""
    per_class = per_class_recall(results, k, upsilon)
    present = [x for x in per_class if x is not None]
    if not present:
        raise ValueError("no ground truth")
    return sum(present) / len(present), per_class


def harmonic_recall(mean_recall, recall):
    if mean_recall < 0 or recall < 0:
        raise ValueError(f"recalls must be non-negative, got mR={mean_recall}, R={recall}")
    if mean_recall + recall == 0:
        return 0.0
    return 2 * mean_recall * recall / (mean_recall + recall)


def zero_shot_recall(results, registry, k):
    """Recall over ground truth triples never seen in training.

    Returns:
        tuple: (recall or None when there is no zero-shot ground truth, number
            of zero-shot ground truth triplets).
    """
    values, count = [], 0
    for r in results:
        hits = [hit for classes, hit in zip(r.gt_classes, r.matched(k)) if classes not in registry]
        if hits:
            values.append(sum(hits) / len(hits))
            count += len(hits)
    return (sum(values) / len(values) if values else None), count


def hbt_report(per_class, partition):
    """Mean per-class recall within the head, body and tail subsets."""
    out = {}
    for name in ("head", "body", "tail"):
        values = [per_class[c] for c in sorted(getattr(partition, name)) if per_class[c] is not None]
        out[name] = sum(values) / len(values) if values else None
    return out


@dataclass
class RecallReport:
    """Metrics of one model at one refinement step, as fractions in [0, 1]."""

    ks: tuple
    recall: dict
    mean_recall: dict
    harmonic: dict
    zero_shot: dict
    zero_shot_count: int
    per_class: dict
    hbt: dict
    step: int | None = None
    model_size: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "step": self.step,
            "model_size": self.model_size,
            "ks": list(self.ks),
            "R": {str(k): v for k, v in self.recall.items()},
            "mR": {str(k): v for k, v in self.mean_recall.items()},
            "hR": {str(k): v for k, v in self.harmonic.items()},
            "zsR": {str(k): v for k, v in self.zero_shot.items()},
            "zsR_count": self.zero_shot_count,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "hbt": self.hbt,
            **self.extra,
        }


def evaluate_results(results, upsilon, registry, partition, ks=(10, 20, 50), step=None, model_size=None):
    """Builds a RecallReport. Head/body/tail means use the largest K."""
    ks = tuple(sorted(ks))
    recall, mean_recall, harmonic, zero_shot, per_class = {}, {}, {}, {}, {}
    count = 0
    for k in ks:
        recall[k] = recall_at_k(results, k)
        mean_recall[k], per_class[k] = mean_recall_at_k(results, k, upsilon)
        harmonic[k] = harmonic_recall(mean_recall[k], recall[k])
        zero_shot[k], count = zero_shot_recall(results, registry, k)
    hbt = hbt_report(per_class[ks[-1]], partition)
    return RecallReport(ks, recall, mean_recall, harmonic, zero_shot, count, per_class, hbt, step, model_size)


def _pct(x):
    return "-" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:.1f}"


def format_table(reports):
    """Plain text table with one row per report: mR@K, R@K, hR@K, zsR@K,
    then head / body / tail."""
    if not reports:
        return ""
    ks = reports[0].ks
    header = ["step", "size"]
    for name in ("mR", "R", "hR", "zsR"):
        header += [f"{name}@{k}" for k in ks]
    header += ["head", "body", "tail"]
    rows = []
    for r in reports:
        row = ["-" if r.step is None else str(r.step), _pct(r.model_size)]
        for metric in (r.mean_recall, r.recall, r.harmonic, r.zero_shot):
            row += [_pct(metric[k]) for k in ks]
        row += [_pct(r.hbt[name]) for name in ("head", "body", "tail")]
        rows.append(row)
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    lines = [" ".join(x.rjust(w) for x, w in zip(line, widths)) for line in [header, *rows]]
    return "\n".join(lines)


def per_class_delta(first, last, k, freq):
    """Per predicate class recall at the first and last step and their
    difference, most frequent training class first. Rows are
    (class, first, last, delta) with None where a class has no ground truth."""
    rows = []
    for c in sorted(range(len(freq.counts)), key=lambda c: (-freq.counts[c], c)):
        a, b = first.per_class[k][c], last.per_class[k][c]
        rows.append((c, a, b, None if a is None or b is None else b - a))
    return rows


def format_class_delta(rows, predicate_names=None):
    lines = [f"{'predicate':>16} {'first':>6} {'last':>6} {'delta':>6}"]
    for c, a, b, d in rows:
        name = predicate_names[c] if predicate_names else str(c)
        lines.append(f"{name:>16} {_pct(a):>6} {_pct(b):>6} {_pct(d):>6}")
    return "\n".join(lines)
