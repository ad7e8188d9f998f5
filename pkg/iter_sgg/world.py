"""The synthetic shapes world.

Scenes are sets of labeled axis-aligned shapes. Relations follow
deterministically from geometry through an ordered list of predicate rules.
Images are replaced by a feature grid that encodes class coverage and the
geometry of the dominant shape in every cell.
"""

import functools
import itertools
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .boxes import BBox
from .graph import SceneGraph

ENTITY_NAMES = ("circle", "square", "triangle", "star", "hexagon", "ring", "cross", "diamond")
BASE_PREDICATES = ("inside", "overlaps", "left of", "above", "near")
RARE_VARIANTS = {
    "inside": "nested in",
    "overlaps": "leaning on",
    "left of": "beside",
    "above": "stacked on",
    "near": "facing",
}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class WorldConfig:
    """Parameters of the shapes world.

    Args:
        eta (int): number of entity categories.
        upsilon (int): number of predicate categories.
        grid_w (int): feature grid width in cells.
        grid_h (int): feature grid height in cells.
        max_entities (int): maximum shapes per scene (at least two are placed).
        tail_skew (float): power-law exponent shrinking the class gates of rare
            predicates; larger values make the predicate tail longer.
        seed (int): 64-bit world seed.
        min_size (float): minimum shape side length.
        max_size (float): maximum shape side length.
        gap (float): maximum gap for "left of" and "above".
        near_dist (float): maximum center distance for "near".
        rule_priority (tuple): predicate names in rule priority order; defaults
            to the rare predicates followed by the base rules.
    """

    eta: int = 6
    upsilon: int = 8
    grid_w: int = 8
    grid_h: int = 8
    max_entities: int = 4
    tail_skew: float = 1.5
    seed: int = 0
    min_size: float = 0.1
    max_size: float = 0.35
    gap: float = 0.25
    near_dist: float = 0.3
    rule_priority: tuple | None = None

    def __post_init__(self):
        if self.eta < 2:
            raise ValueError(f"eta must be at least 2, got {self.eta}")
        if self.upsilon < 4:
            raise ValueError(f"upsilon must be at least 4, got {self.upsilon}")
        if not 2 <= self.max_entities <= 16:
            raise ValueError(f"max_entities must be in [2, 16], got {self.max_entities}")
        if self.tail_skew < 0:
            raise ValueError(f"tail_skew must be non-negative, got {self.tail_skew}")
        if self.grid_w < 1 or self.grid_h < 1:
            raise ValueError(f"invalid grid size {self.grid_w}x{self.grid_h}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not 0 < self.min_size <= self.max_size <= 1:
            raise ValueError(f"invalid shape size range [{self.min_size}, {self.max_size}]")
        if self.rule_priority is not None:
            object.__setattr__(self, "rule_priority", tuple(self.rule_priority))
            if sorted(self.rule_priority) != sorted(predicate_names(self)):
                raise ValueError(f"rule_priority must be a permutation of {predicate_names(self)}")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self):
        d = asdict(self)
        if d["rule_priority"] is not None:
            d["rule_priority"] = list(d["rule_priority"])
        return d

    @property
    def channels(self):
        return self.eta + 4

    @property
    def max_triplets(self):
        """Upper bound on relations per scene: one per ordered entity pair."""
        return self.max_entities * (self.max_entities - 1)


def entity_names(cfg):
    return [ENTITY_NAMES[i] if i < len(ENTITY_NAMES) else f"shape{i}" for i in range(cfg.eta)]


def _base_predicates(cfg):
    return BASE_PREDICATES[: min(len(BASE_PREDICATES), cfg.upsilon)]


def predicate_names(cfg):
    """Predicate class names indexed by class id: base rules first, then the
    class-gated rare refinements."""
    base = _base_predicates(cfg)
    names = list(base)
    for r in range(1, cfg.upsilon - len(base) + 1):
        refined = base[(r - 1) % len(base)]
        lap = (r - 1) // len(base)
        names.append(RARE_VARIANTS[refined] + (f" {lap + 1}" if lap else ""))
    return names


@dataclass(frozen=True)
class PredicateRule:
    name: str
    predicate_class: int
    base: str
    gate: frozenset | None = None

    def applies(self, s, o, cfg):
        """Whether the rule holds for the ordered pair of (class_id, BBox) entities."""
        if self.gate is not None and (s[0], o[0]) not in self.gate:
            return False
        return GEOMETRIC_TESTS[self.base](s[1].to_xyxy(), o[1].to_xyxy(), cfg)


def _center(b):
    return (b[0] + b[2]) / 2, (b[1] + b[3]) / 2


def _leads(s, o):
    return _center(s) < _center(o)


def _inside(s, o, cfg):
    return s[0] >= o[0] and s[1] >= o[1] and s[2] <= o[2] and s[3] <= o[3]


def _overlaps(s, o, cfg):
    iw = min(s[2], o[2]) - max(s[0], o[0])
    ih = min(s[3], o[3]) - max(s[1], o[1])
    return iw > 0 and ih > 0 and _leads(s, o)


def _left_of(s, o, cfg):
    return s[2] < o[0] and o[0] - s[2] < cfg.gap and min(s[3], o[3]) > max(s[1], o[1])


def _above(s, o, cfg):
    return s[3] < o[1] and o[1] - s[3] < cfg.gap and min(s[2], o[2]) > max(s[0], o[0])


def _near(s, o, cfg):
    (sx, sy), (ox, oy) = _center(s), _center(o)
    return math.hypot(sx - ox, sy - oy) < cfg.near_dist and _leads(s, o)


GEOMETRIC_TESTS = {
    "inside": _inside,
    "overlaps": _overlaps,
    "left of": _left_of,
    "above": _above,
    "near": _near,
}


def gate_size(cfg, rank):
    """Number of (subject class, object class) pairs admitted by the rare rule of
    the given 1-based rank."""
    return max(1, round(cfg.eta**2 * 0.5 * (rank + 1) ** (-2 * cfg.tail_skew)))


@functools.lru_cache(maxsize=64)
def relation_rules(cfg):
    """The predicate rules of a world, in priority order."""
    base = _base_predicates(cfg)
    names = predicate_names(cfg)
    rules = {}
    for class_id, name in enumerate(names):
        if class_id < len(base):
            rules[name] = PredicateRule(name, class_id, name)
            continue
        rank = class_id - len(base) + 1
        rng = np.random.default_rng([cfg.seed, 0x5EED, rank])
        picked = rng.permutation(cfg.eta**2)[: gate_size(cfg, rank)]
        gate = frozenset((int(k) // cfg.eta, int(k) % cfg.eta) for k in picked)
        rules[name] = PredicateRule(name, class_id, base[(rank - 1) % len(base)], gate)
    order = cfg.rule_priority or tuple(names[len(base) :]) + tuple(base)
    return tuple(rules[name] for name in order)


def derive_relation_indices(entities, cfg):
    """(subject index, object index, predicate class) for every related ordered pair.

    Each ordered pair (a, b), a != b, carries at most one relation: the first
    rule in priority order that holds with a as subject and b as object. The
    reverse pair is tested on its own, so both directions may be related.
    """
    if len(entities) < 2:
        raise ValueError(f"need at least 2 entities, got {len(entities)}")
    rules = relation_rules(cfg)
    out = []
    for a, b in itertools.permutations(range(len(entities)), 2):
        for rule in rules:
            if rule.applies(entities[a], entities[b], cfg):
                out.append((a, b, rule.predicate_class))
                break
    return out


def derive_relations(entities, cfg):
    """Relations of a list of (class_id, BBox) entities as Triplets."""
    return list(SceneGraph.from_nodes("", entities, derive_relation_indices(entities, cfg)).triplets)


def _f32(x):
    return float(np.float32(x))


def sample_entities(cfg, rng):
    n = int(rng.integers(2, cfg.max_entities + 1))
    classes = rng.integers(0, cfg.eta, size=n)
    w = rng.uniform(cfg.min_size, cfg.max_size, size=n)
    h = rng.uniform(cfg.min_size, cfg.max_size, size=n)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return [(int(classes[i]), BBox(_f32(cx[i]), _f32(cy[i]), _f32(w[i]), _f32(h[i]))) for i in range(n)]


def render_grid(entities, cfg):
    """Renders entities into a (eta + 4, grid_h, grid_w) float32 feature grid.

    Channel k < eta holds the largest fraction of each cell covered by a shape
    of class k. The last four channels hold the center offset (dx, dy) from
    the cell center and the size (w, h) of the shape covering the cell most.
    Uncovered cells are zero.
    """
    boxes = np.array([b.to_xyxy() for _, b in entities], dtype=np.float64)
    xs = np.arange(cfg.grid_w) / cfg.grid_w
    ys = np.arange(cfg.grid_h) / cfg.grid_h
    ix = np.clip(np.minimum(boxes[:, 2:3], xs + 1 / cfg.grid_w) - np.maximum(boxes[:, 0:1], xs), 0, None)
    iy = np.clip(np.minimum(boxes[:, 3:4], ys + 1 / cfg.grid_h) - np.maximum(boxes[:, 1:2], ys), 0, None)
    cover = iy[:, :, None] * ix[:, None, :] * (cfg.grid_w * cfg.grid_h)
    grid = np.zeros((cfg.channels, cfg.grid_h, cfg.grid_w))
    for k, (class_id, _) in enumerate(entities):
        grid[class_id] = np.maximum(grid[class_id], cover[k])
    dom = cover.argmax(0)
    covered = cover.max(0) > 0
    centers = np.array([[b.cx, b.cy, b.w, b.h] for _, b in entities])[dom]
    cell_x = (np.arange(cfg.grid_w) + 0.5) / cfg.grid_w
    cell_y = (np.arange(cfg.grid_h) + 0.5) / cfg.grid_h
    grid[cfg.eta] = np.where(covered, centers[..., 0] - cell_x[None, :], 0)
    grid[cfg.eta + 1] = np.where(covered, centers[..., 1] - cell_y[:, None], 0)
    grid[cfg.eta + 2] = np.where(covered, centers[..., 2], 0)
    grid[cfg.eta + 3] = np.where(covered, centers[..., 3], 0)
    return np.clip(grid, -1, 1).astype(np.float32)


def generate_scene(cfg, rng, scene_id="scene"):
    """Places shapes and derives the scene's feature grid and relations.

    Returns:
        (grid, graph): the float32 feature grid and the scene graph.
    """
    entities = sample_entities(cfg, rng)
    graph = SceneGraph.from_nodes(scene_id, entities, derive_relation_indices(entities, cfg))
    return render_grid(entities, cfg), graph


def scene_rng(cfg, split, index):
    """The per-scene random substream, independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, SPLITS.index(split), index]))
