import numpy as np
import pytest

from iter_sgg import assembly, boxes
from iter_sgg.assembly import AssembledGraph, AssemblyConfig
from iter_sgg.boxes import BBox
from iter_sgg.models import TripletHypothesis

ETA, UPSILON = 3, 4


def dist(probs):
    return np.asarray(probs, dtype=np.float64)


def hyp(s, o, p, s_box, o_box):
    return TripletHypothesis(dist(s), dist(o), dist(p), s_box, o_box, boxes.predicate_box_of(s_box, o_box))


def random_entries(rng, n, n_classes=3):
    out = []
    for _ in range(n):
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        w, h = rng.uniform(0.05, 0.4, size=2)
        out.append((int(rng.integers(n_classes)), BBox(cx, cy, w, h), float(rng.integers(0, 20)) / 20))
    return out


def reference_nms(entries, thr):
    order = np.lexsort((np.arange(len(entries)), -np.array([e[2] for e in entries])))
    suppressed = np.zeros(len(entries), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        for j in order[pos + 1 :]:
            if entries[j][0] == entries[i][0] and boxes.iou(entries[i][1], entries[j][1]) > thr:
                suppressed[j] = True
    return sorted(keep)


def test_nms_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        entries = random_entries(rng, int(rng.integers(0, 12)))
        thr = float(rng.uniform(0.1, 0.9))
        assert assembly.nms_per_class(entries, thr) == reference_nms(entries, thr)


def test_nms_is_per_class():
    box = BBox(0.5, 0.5, 0.2, 0.2)
    assert assembly.nms_per_class([(0, box, 0.9), (1, box, 0.8), (0, box, 0.7)], 0.5) == [0, 1]


def test_nms_rejects_non_finite_scores():
    with pytest.raises(ValueError, match="non-finite"):
        assembly.nms_per_class([(0, BBox(0.5, 0.5, 0.2, 0.2), float("nan"))], 0.5)


def test_assign_entities_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(300):
        nodes = random_entries(rng, int(rng.integers(0, 6)))
        entries = random_entries(rng, int(rng.integers(1, 8)))
        indices, extended = assembly.assign_entities(entries, nodes)
        assert extended[: len(nodes)] == nodes
        grown = list(nodes)
        for (c, box, score), k in zip(entries, indices):
            overlaps = [boxes.iou(box, b) if nc == c else 0.0 for nc, b, _ in grown]
            if overlaps and max(overlaps) > 0:
                assert k == int(np.argmax(overlaps))
            else:
                grown.append((c, box, score))
                assert k == len(grown) - 1
        assert extended == grown


def test_assign_entities_ties_go_to_lowest_index():
    box = BBox(0.5, 0.5, 0.2, 0.2)
    indices, nodes = assembly.assign_entities([(0, box, 1.0)], [(0, box, 0.5), (0, box, 0.9)])
    assert indices == [0]
    assert len(nodes) == 2


def test_top_predicates_skip_empty_class():
    assert assembly.top_predicates([0.1, 0.3, 0.05, 0.05, 0.5], 2) == [1, 0]


A = BBox(0.3, 0.3, 0.2, 0.2)
B = BBox(0.7, 0.7, 0.2, 0.2)


def test_assemble_merges_duplicate_slots():
    hyps = [
        hyp([0.9, 0.05, 0.05, 0.0], [0.0, 0.9, 0.1, 0.0], [0.0, 0.8, 0.1, 0.1, 0.0], A, B),
        hyp([0.8, 0.1, 0.1, 0.0], [0.0, 0.9, 0.1, 0.0], [0.0, 0.7, 0.3, 0.0, 0.0], BBox(0.31, 0.3, 0.2, 0.2), B),
        hyp([0.0, 0.0, 0.1, 0.9], [0.0, 0.9, 0.1, 0.0], [0.0, 0.8, 0.1, 0.1, 0.0], A, B),
    ]
    graph = assembly.assemble(hyps, step=2)
    assert [(c, b) for c, b, _ in graph.nodes] == [(0, A), (1, B)]
    assert len(graph.edges) == 1
    s, o, p, score = graph.edges[0]
    assert (s, o, p) == (0, 1, 1)
    assert score == pytest.approx(0.9 * 0.9 * 0.8)


def test_assemble_score_floor_and_top_m():
    hyps = [hyp([0.5, 0.5, 0.0, 0.0], [0.0, 0.5, 0.5, 0.0], [0.5, 0.3, 0.2, 0.0, 0.0], A, B)]
    assert assembly.assemble(hyps, AssemblyConfig(score_floor=0.5)).edges == []
    graph = assembly.assemble(hyps, AssemblyConfig(score_floor=0.05, top_m=2))
    assert [p for _, _, p, _ in graph.edges] == [0, 1]
    scores = [e[3] for e in graph.edges]
    assert scores == sorted(scores, reverse=True)


def test_assemble_empty():
    assert assembly.assemble([]).edges == []


@pytest.mark.parametrize("kwargs", [{"nms_iou": 0.0}, {"nms_iou": 1.0}, {"top_m": 0}, {"score_floor": -0.1}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        AssemblyConfig(**kwargs)


def test_serialization():
    graph = AssembledGraph([(0, A, 0.9), (1, B, 0.8)], [(0, 1, 2, 0.5)], step=3)
    assert AssembledGraph.from_dict(graph.to_dict()) == graph
    dot = graph.to_dot(["circle", "square"], ["inside", "overlaps", "left of"], name="val-000001")
    assert dot.startswith('digraph "val-000001" {')
    assert 'n0 [label="circle@3"];' in dot
    assert 'n0 -> n1 [label="left of 0.500"];' in dot
    assert dot.rstrip().endswith("}")
    assert '"predicate": 2' in graph.to_json()
