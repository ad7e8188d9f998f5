from . import (
    assembly,
    boxes,
    config,
    criterion,
    dataset,
    detector,
    evaluation,
    graph,
    layers,
    matching,
    models,
    training,
    utils,
    world,
)
from .boxes import BBox
from .graph import SceneGraph, Triplet
