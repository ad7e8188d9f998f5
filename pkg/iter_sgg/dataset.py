"""Dataset persistence, training statistics and the torch dataset wrapper.

A dataset directory holds one JSONL shard per split and a ``manifest.json``
with the world config echo, per-shard SHA-256 hashes and the statistics
derived from the training split.
"""

import base64
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
import torch
from torch.utils import data
from tqdm.auto import tqdm

from .boxes import BBox
from .graph import SceneGraph
from .world import SPLITS, WorldConfig, generate_scene, scene_rng


class DatasetIntegrityError(ValueError):
    """A shard does not match the hash recorded in its manifest."""


@dataclass(frozen=True)
class FrequencyTable:
    """Per-predicate relation counts over the training split."""

    counts: tuple

    def __post_init__(self):
        if sum(self.counts) <= 0:
            raise ValueError("frequency table has no relations")

    @classmethod
    def from_graphs(cls, graphs, upsilon):
        counts = [0] * upsilon
        for g in graphs:
            for t in g.triplets:
                counts[t.predicate_class] += 1
        return cls(tuple(counts))

    @property
    def fractions(self):
        total = sum(self.counts)
        return tuple(c / total for c in self.counts)

    def __len__(self):
        return len(self.counts)


@dataclass(frozen=True)
class TripletRegistry:
    """(subject class, predicate class, object class) triples seen in training."""

    triples: frozenset = frozenset()

    @classmethod
    def from_graphs(cls, graphs):
        return cls(frozenset(t.classes for g in graphs for t in g.triplets))

    def __contains__(self, triple):
        return tuple(triple) in self.triples

    def __len__(self):
        return len(self.triples)


@dataclass(frozen=True)
class HBTPartition:
    head: frozenset
    body: frozenset
    tail: frozenset

    def __post_init__(self):
        if self.head & self.body or self.head & self.tail or self.body & self.tail:
            raise ValueError("head, body and tail must be disjoint")

    def covers(self, upsilon):
        return self.head | self.body | self.tail == frozenset(range(upsilon))

    def to_dict(self):
        return {k: sorted(getattr(self, k)) for k in ("head", "body", "tail")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(frozenset(d[k]) for k in ("head", "body", "tail")))


def hbt_partition(freq, head=0.1, tail=0.01):
    """Splits predicate classes by count relative to the most frequent class.

    Classes with at least ``head`` times the maximum count are head classes,
    classes under ``tail`` times the maximum are tail classes, the rest body.
    """
    top = max(freq.counts)
    parts = {"head": set(), "body": set(), "tail": set()}
    for c, count in enumerate(freq.counts):
        ratio = count / top
        parts["head" if ratio >= head else "tail" if ratio < tail else "body"].add(c)
    return HBTPartition(*(frozenset(parts[k]) for k in ("head", "body", "tail")))


@dataclass(frozen=True)
class PairStatistics:
    """Predicate counts per (subject class, object class) over training relations."""

    counts: tuple

    @classmethod
    def from_graphs(cls, graphs, eta, upsilon):
        counts = np.zeros((eta, eta, upsilon), dtype=np.int64)
        for g in graphs:
            for t in g.triplets:
                counts[t.subject.class_id, t.object.class_id, t.predicate_class] += 1
        return cls(tuple(map(tuple, counts.reshape(eta * eta, upsilon).tolist())))

    def as_array(self):
        counts = np.array(self.counts, dtype=np.float64)
        eta = int(round(len(self.counts) ** 0.5))
        return counts.reshape(eta, eta, -1)


def freq_prior_predict(subject_class, object_class, stats):
    """Empirical predicate distribution of a class pair, backing off to the
    marginal predicate distribution for pairs never seen in training."""
    counts = stats.as_array()
    row = counts[subject_class, object_class]
    if row.sum() == 0:
        row = counts.sum((0, 1))
    return row / row.sum()


def encode_grid(grid):
    grid = np.ascontiguousarray(grid, dtype="<f4")
    return {"shape": list(grid.shape), "data": base64.b64encode(grid.tobytes()).decode("ascii")}


def decode_grid(d):
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(d["shape"]).astype(np.float32)


def scene_to_record(grid, graph):
    return {
        "scene_id": graph.scene_id,
        "grid": encode_grid(grid),
        "entities": [{"class": c, "box": b.to_list()} for c, b in graph.entity_instances],
        "triplets": [{"s": s, "o": o, "p": p} for s, o, p in graph.relations],
    }


def record_to_scene(record):
    entities = [(e["class"], BBox.from_list(e["box"])) for e in record["entities"]]
    relations = [(t["s"], t["o"], t["p"]) for t in record["triplets"]]
    return decode_grid(record["grid"]), SceneGraph.from_nodes(record["scene_id"], entities, relations)


def _make_line(cfg, split, index):
    grid, graph = generate_scene(cfg, scene_rng(cfg, split, index), scene_id=f"{split}-{index:06d}")
    return json.dumps(scene_to_record(grid, graph), separators=(",", ":"))


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class DatasetManifest:
    """In-memory form of ``manifest.json``."""

    world: WorldConfig
    splits: dict
    frequency: FrequencyTable
    registry: TripletRegistry
    partition: HBTPartition
    pair_stats: PairStatistics
    root: Path = field(default=Path("."), compare=False)

    def to_dict(self):
        return {
            "world": self.world.to_dict(),
            "splits": self.splits,
            "frequency": list(self.frequency.counts),
            "registry": sorted(list(t) for t in self.registry.triples),
            "partition": self.partition.to_dict(),
            "pair_stats": [list(row) for row in self.pair_stats.counts],
        }

    @classmethod
    def from_dict(cls, d, root=Path(".")):
        return cls(
            world=WorldConfig.from_dict(d["world"]),
            splits=d["splits"],
            frequency=FrequencyTable(tuple(d["frequency"])),
            registry=TripletRegistry(frozenset(tuple(t) for t in d["registry"])),
            partition=HBTPartition.from_dict(d["partition"]),
            pair_stats=PairStatistics(tuple(tuple(row) for row in d["pair_stats"])),
            root=Path(root),
        )

    @property
    def hash(self):
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def split_path(self, split):
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}")
        return self.root / self.splits[split]["path"]


def build_dataset(cfg, n_train, n_val, n_test, path, num_workers=1, hbt=(0.1, 0.01)):
    """Generates all splits under ``path`` and writes the manifest.

    Scenes draw from per-scene random substreams, so the output does not
    depend on ``num_workers``.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    splits = {}
    train_graphs = []
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        make = partial(_make_line, cfg, split)
        if num_workers > 1:
            with ProcessPoolExecutor(num_workers) as ex:
                lines = list(ex.map(make, range(n), chunksize=64))
        else:
            lines = [make(i) for i in tqdm(range(n), desc=split, leave=False)]
        shard = path / f"{split}.jsonl"
        shard.write_text("".join(line + "\n" for line in lines))
        splits[split] = {"path": shard.name, "sha256": sha256_file(shard), "n": n}
        if split == "train":
            train_graphs = [record_to_scene(json.loads(line))[1] for line in lines]

    frequency = FrequencyTable.from_graphs(train_graphs, cfg.upsilon)
    manifest = DatasetManifest(
        world=cfg,
        splits=splits,
        frequency=frequency,
        registry=TripletRegistry.from_graphs(train_graphs),
        partition=hbt_partition(frequency, *hbt),
        pair_stats=PairStatistics.from_graphs(train_graphs, cfg.eta, cfg.upsilon),
        root=path,
    )
    (path / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(path, verify=True):
    """Reads a manifest (or the ``manifest.json`` in a directory), checking
    every shard's hash."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = DatasetManifest.from_dict(json.loads(path.read_text()), root=path.parent)
    if verify:
        for split, entry in manifest.splits.items():
            digest = sha256_file(manifest.split_path(split))
            if digest != entry["sha256"]:
                raise DatasetIntegrityError(f"hash of {split} shard {entry['path']} does not match the manifest")
    return manifest


def load_split(manifest, split):
    """Returns the (grid, SceneGraph) pairs of a split."""
    with open(manifest.split_path(split)) as f:
        return [record_to_scene(json.loads(line)) for line in f if line.strip()]


class SceneDataset(data.Dataset):
    """Scenes of one split as tensors."""

    def __init__(self, scenes):
        self.scenes = scenes

    def __len__(self):
        return len(self.scenes)

    def __getitem__(self, index):
        grid, graph = self.scenes[index]
        entities = graph.entity_instances
        return {
            "scene_id": graph.scene_id,
            "grid": torch.from_numpy(grid.copy()),
            "labels": torch.tensor([c for c, _ in entities], dtype=torch.long),
            "boxes": torch.tensor([b.to_list() for _, b in entities], dtype=torch.float32).reshape(-1, 4),
            "relations": torch.tensor(graph.relations, dtype=torch.long).reshape(-1, 3),
            "index": index,
        }


def collate_scenes(batch):
    """Stacks grids; keeps per-scene targets as a list."""
    return torch.stack([item["grid"] for item in batch]), batch
