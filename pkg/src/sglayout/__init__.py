"""Scene graphs to image layouts via extreme points, with shape-aware patch retrieval."""

from .errors import (DegenerateGeometry, EmptyDataset, EmptyMask, IncompleteNode, NoForwardCache,
                     NoRelations, ParseError, SceneRejected, SGLError, ShapeMismatch,
                     UnknownPredicate, UnknownVocab)
from .geometry import BoundingBox, ExtremePoints
from .scenegraph import Kind, Predicate, SceneGraph, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "DegenerateGeometry", "EmptyDataset", "EmptyMask", "ExtremePoints",
    "IncompleteNode", "Kind", "NoForwardCache", "NoRelations", "ParseError", "Predicate",
    "SceneGraph", "SceneRejected", "SGLError", "ShapeMismatch", "UnknownPredicate",
    "UnknownVocab", "Vocabulary",
]
