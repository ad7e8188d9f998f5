"""Scene graph types."""

import math
from dataclasses import dataclass

from .boxes import BBox, predicate_box_of


@dataclass(frozen=True)
class EntityRef:
    class_id: int
    box: BBox


@dataclass(frozen=True)
class Triplet:
    subject: EntityRef
    object: EntityRef
    predicate_class: int
    predicate_box: BBox

    @classmethod
    def between(cls, subject, obj, predicate_class):
        """Builds a triplet, deriving the predicate box from the entity boxes."""
        return cls(subject, obj, predicate_class, predicate_box_of(subject.box, obj.box))

    @property
    def classes(self):
        """The (subject, predicate, object) class triple."""
        return self.subject.class_id, self.predicate_class, self.object.class_id


@dataclass(frozen=True)
class SceneGraph:
    """A set of relation triplets for one scene.

    When ``entity_instances`` is given, ``pair_index`` holds the
    (subject node, object node) indices of every triplet.
    """

    scene_id: str
    triplets: tuple = ()
    entity_instances: tuple | None = None
    pair_index: tuple | None = None

    @classmethod
    def from_nodes(cls, scene_id, entities, relations):
        """Builds a graph from node records and (s, o, p) index triples."""
        entities = tuple(entities)
        refs = [EntityRef(class_id, box) for class_id, box in entities]
        triplets = tuple(Triplet.between(refs[s], refs[o], p) for s, o, p in relations)
        pair_index = tuple((s, o) for s, o, _ in relations)
        return cls(scene_id, triplets, entities, pair_index)

    @property
    def relations(self):
        """(s_node, o_node, predicate) index triples; requires node records."""
        if self.pair_index is None:
            raise ValueError(f"scene {self.scene_id} has no entity instances")
        return [(s, o, t.predicate_class) for (s, o), t in zip(self.pair_index, self.triplets)]

    def __len__(self):
        return len(self.triplets)


def _close(a, b, tol):
    return all(math.isclose(x, y, abs_tol=tol) for x, y in zip(a.to_list(), b.to_list()))


def validate_graph(g, eta=None, upsilon=None, tol=1e-6):
    """Checks every scene graph invariant and returns all violations found.

    An empty list means the graph is valid. Class ranges are only checked when
    ``eta`` / ``upsilon`` are given.
    """
    violations = []
    for i, t in enumerate(g.triplets):
        for role, ref in (("subject", t.subject), ("object", t.object)):
            violations += [f"triplet {i} {role} box: {v}" for v in ref.box.violations(strict=True)]
            if ref.class_id < 0 or (eta is not None and ref.class_id >= eta):
                violations.append(f"triplet {i} {role} class {ref.class_id} out of range")
        violations += [f"triplet {i} predicate box: {v}" for v in t.predicate_box.violations()]
        if t.predicate_class < 0 or (upsilon is not None and t.predicate_class >= upsilon):
            violations.append(f"triplet {i} predicate class {t.predicate_class} out of range")
        if not _close(t.predicate_box, predicate_box_of(t.subject.box, t.object.box), tol):
            violations.append(f"triplet {i} predicate box does not match its entity centers")

    if g.entity_instances is None:
        return violations
    if g.pair_index is None or len(g.pair_index) != len(g.triplets):
        violations.append("pair index missing or not aligned with triplets")
        return violations
    seen = set()
    for i, ((s, o), t) in enumerate(zip(g.pair_index, g.triplets)):
        key = s, o, t.predicate_class
        if key in seen:
            violations.append(f"triplet {i} duplicates (node {s}, node {o}, predicate {t.predicate_class})")
        seen.add(key)
        for role, node, ref in (("subject", s, t.subject), ("object", o, t.object)):
            if not 0 <= node < len(g.entity_instances):
                violations.append(f"triplet {i} {role} node {node} out of range")
            elif EntityRef(*g.entity_instances[node]) != ref:
                violations.append(f"triplet {i} {role} does not match node {node}")
    return violations
