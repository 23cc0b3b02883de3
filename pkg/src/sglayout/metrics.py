"""Relation score and average IoU for predicted layouts."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometry, NoRelations, ShapeMismatch, UnknownPredicate
from .geometry import BoundingBox, ExtremePoints, box_iou
from .scenegraph import PREDICATES, Kind, Predicate, RelationEdge, SceneGraph, classify_relation


@dataclass
class LayoutPrediction:
    """Per-object predictions aligned with a graph's objects (normalized frame)."""

    extreme_points: list[ExtremePoints]
    boxes: list[BoundingBox]
    masks: np.ndarray | None = None
    sanitized: list[bool] = field(default_factory=list)

    def __len__(self):
        return len(self.boxes)


def _as_boxes(pred) -> Sequence[BoundingBox]:
    return pred.boxes if isinstance(pred, LayoutPrediction) else pred


def relation_satisfied(edge: RelationEdge, subject_box: BoundingBox, object_box: BoundingBox,
                       subject_kind: Kind | None = None, object_kind: Kind | None = None) -> bool:
    """Does the predicted box pair comply with the edge's predicate?

    Geometric predicates re-run the labeling rule. Depth predicates compare
    bottom edges only. ``on``/``under`` need overlap and, when kinds are
    given, a thing on a stuff region.
    """
    p = edge.predicate
    if not isinstance(p, Predicate):
        raise UnknownPredicate(f"unknown predicate {p!r}")
    if p.is_geometric:
        try:
            return classify_relation(subject_box, object_box) is p
        except DegenerateGeometry:
            return False
    if p is Predicate.IN_FRONT_OF:
        return subject_box.bottom > object_box.bottom
    if p is Predicate.BEHIND:
        return subject_box.bottom < object_box.bottom
    if subject_kind is not None and object_kind is not None:
        want = (Kind.THING, Kind.STUFF) if p is Predicate.ON else (Kind.STUFF, Kind.THING)
        if (subject_kind, object_kind) != want:
            return False
    return subject_box.intersection_area(object_box) > 0


def _check_arity(graph: SceneGraph, boxes):
    if len(boxes) != len(graph.objects):
        raise ShapeMismatch(f"{len(boxes)} predicted boxes for {len(graph.objects)} objects")


def satisfied_edges(graph: SceneGraph, pred) -> list[bool]:
    boxes = _as_boxes(pred)
    _check_arity(graph, boxes)
    objs = graph.objects
    return [relation_satisfied(e, boxes[e.subject], boxes[e.object],
                               objs[e.subject].kind, objs[e.object].kind)
            for e in graph.relations]


def relation_score(graph: SceneGraph, pred) -> float:
    """Fraction of the graph's edges satisfied by the predicted boxes."""
    if not graph.relations:
        raise NoRelations("graph has no relations to score")
    sat = satisfied_edges(graph, pred)
    return sum(sat) / len(sat)


def avg_iou(graph: SceneGraph, pred, gt_boxes: Sequence[BoundingBox]) -> float:
    boxes = _as_boxes(pred)
    _check_arity(graph, boxes)
    if len(gt_boxes) != len(boxes):
        raise ShapeMismatch(f"{len(boxes)} predicted boxes vs {len(gt_boxes)} ground-truth boxes")
    return float(np.mean([box_iou(p, g) for p, g in zip(boxes, gt_boxes)]))


@dataclass
class EvalReport:
    relation_score: float
    avg_iou: float
    per_predicate: "OrderedDict[str, tuple[int, int]]"
    n_relations: int
    n_objects: int
    n_graphs: int = 1

    def to_dict(self) -> dict:
        return {
            "relation_score": self.relation_score,
            "avg_iou": self.avg_iou,
            "n_graphs": self.n_graphs,
            "n_relations": self.n_relations,
            "n_objects": self.n_objects,
            "per_predicate": {k: {"satisfied": s, "total": t}
                              for k, (s, t) in self.per_predicate.items()},
        }


def evaluate(graphs: Sequence[SceneGraph], preds: Sequence, gt_boxes: Sequence[Sequence[BoundingBox]]) -> EvalReport:
    """Pool relation satisfaction over all edges and IoU over all objects."""
    counts = OrderedDict((p.value, [0, 0]) for p in PREDICATES)
    ious = []
    for graph, pred, gt in zip(graphs, preds, gt_boxes, strict=True):
        for e, ok in zip(graph.relations, satisfied_edges(graph, pred)):
            c = counts[e.predicate.value]
            c[0] += int(ok)
            c[1] += 1
        boxes = _as_boxes(pred)
        if len(gt) != len(boxes):
            raise ShapeMismatch(f"{len(boxes)} predicted boxes vs {len(gt)} ground-truth boxes")
        ious.extend(box_iou(p, g) for p, g in zip(boxes, gt))
    n_rel = sum(t for _, t in counts.values())
    if n_rel == 0:
        raise NoRelations("no relations to score")
    n_sat = sum(s for s, _ in counts.values())
    return EvalReport(
        relation_score=n_sat / n_rel,
        avg_iou=float(np.mean(ious)),
        per_predicate=OrderedDict((k, (s, t)) for k, (s, t) in counts.items()),
        n_relations=n_rel,
        n_objects=len(ious),
        n_graphs=len(graphs),
    )
