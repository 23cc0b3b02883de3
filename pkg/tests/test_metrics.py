import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sglayout.errors import DegenerateGeometry, NoRelations, ShapeMismatch, UnknownPredicate
from sglayout.geometry import BoundingBox
from sglayout.metrics import avg_iou, evaluate, relation_satisfied, relation_score
from sglayout.scenegraph import (Kind, ObjectNode, Predicate, RelationEdge, SceneGraph,
                                 classify_relation)
from sglayout.synth import SynthConfig, synth_generate

P = Predicate
GOLDEN = Path(__file__).parent / "golden" / "eval_report.json"


def two_node_graph(rels, kinds=(Kind.THING, Kind.THING)):
    objs = (ObjectNode(0, "a", kinds[0], BoundingBox(0, 0, 1, 1)),
            ObjectNode(1, "b", kinds[1], BoundingBox(1, 1, 2, 2)))
    return SceneGraph((100, 100), objs, tuple(rels))


def test_fig1_high_iou_but_wrong_relation():
    edge = RelationEdge(0, P.ABOVE, 1)
    a, b = BoundingBox(0.1, 0.3, 0.6, 0.8), BoundingBox(0.1, 0.2, 0.6, 0.7)   # b sits above a
    assert not relation_satisfied(edge, a, b)
    assert relation_score(two_node_graph([edge]), [a, b]) == 0.0


def test_fig1_disjoint_but_compliant():
    edge = RelationEdge(0, P.ABOVE, 1)
    a, b = BoundingBox(0.4, 0.0, 0.6, 0.2), BoundingBox(0.3, 0.5, 0.7, 0.9)
    assert a.intersection_area(b) == 0
    assert relation_score(two_node_graph([edge]), [a, b]) == 1.0


def test_depth_predicates_compare_bottoms():
    front, back = BoundingBox(0, 0.5, 0.2, 0.9), BoundingBox(0.5, 0.1, 0.7, 0.6)
    assert relation_satisfied(RelationEdge(0, P.IN_FRONT_OF, 1), front, back)
    assert not relation_satisfied(RelationEdge(0, P.IN_FRONT_OF, 1), back, front)
    assert relation_satisfied(RelationEdge(1, P.BEHIND, 0), back, front)


def test_on_needs_overlap_and_thing_on_stuff():
    thing, stuff = BoundingBox(0.4, 0.3, 0.6, 0.7), BoundingBox(0, 0.5, 1, 1)
    on = RelationEdge(0, P.ON, 1)
    assert relation_satisfied(on, thing, stuff)
    assert relation_satisfied(on, thing, stuff, Kind.THING, Kind.STUFF)
    assert not relation_satisfied(on, thing, stuff, Kind.STUFF, Kind.THING)
    assert not relation_satisfied(on, thing, BoundingBox(0, 0.8, 0.1, 1))
    assert relation_satisfied(RelationEdge(1, P.UNDER, 0), stuff, thing, Kind.STUFF, Kind.THING)


def test_unknown_predicate():
    edge = RelationEdge(0, "next to", 1)
    with pytest.raises(UnknownPredicate):
        relation_satisfied(edge, BoundingBox(0, 0, 1, 1), BoundingBox(2, 2, 3, 3))


def test_half_score_and_no_relations():
    g = two_node_graph([RelationEdge(0, P.LEFT_OF, 1), RelationEdge(0, P.RIGHT_OF, 1)])
    assert relation_score(g, [BoundingBox(0, 0, 1, 1), BoundingBox(3, 0, 4, 1)]) == 0.5
    with pytest.raises(NoRelations):
        relation_score(two_node_graph([]), [BoundingBox(0, 0, 1, 1)] * 2)


def test_avg_iou():
    gt = [BoundingBox(0, 0, 2, 2), BoundingBox(0, 0, 2, 2)]
    g = two_node_graph([])
    assert avg_iou(g, gt, gt) == 1.0
    assert avg_iou(g, [BoundingBox(5, 5, 6, 6)] * 2, gt) == 0.0
    assert avg_iou(g, [gt[0], BoundingBox(1, 0, 3, 2)], gt) == pytest.approx(2 / 3)
    with pytest.raises(ShapeMismatch):
        avg_iou(g, gt[:1], gt)


@pytest.mark.parametrize("augment", [False, True])
def test_ground_truth_scores_one(augment):
    scenes = synth_generate(SynthConfig(seed=5, num_scenes=30, augment=augment))
    for s in scenes:
        assert relation_score(s.graph, s.graph.boxes()) == 1.0


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_score_invariant_under_uniform_scaling(seed, k):
    s = synth_generate(SynthConfig(seed=seed, num_scenes=1))[0]
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in s.graph.objects:
        x0, x1 = np.sort(rng.uniform(0, 1, 2))
        y0, y1 = np.sort(rng.uniform(0, 1, 2))
        boxes.append(BoundingBox(x0, y0, x1 + 1e-3, y1 + 1e-3))
    scaled = [b.scaled(k, k) for b in boxes]
    assert relation_score(s.graph, boxes) == relation_score(s.graph, scaled)


def test_adding_satisfied_edge_does_not_lower_satisfied_count():
    s = synth_generate(SynthConfig(seed=9, num_scenes=1, augment=False))[0]
    boxes = s.graph.boxes()
    base = relation_score(s.graph, boxes) * len(s.graph.relations)
    existing = {e.triple for e in s.graph.relations}
    for i in range(len(boxes)):
        for j in range(len(boxes)):
            if i == j:
                continue
            try:
                p = classify_relation(boxes[i], boxes[j])
            except DegenerateGeometry:
                continue
            if (i, p, j) in existing:
                continue
            bigger = SceneGraph(s.graph.image_size, s.graph.objects,
                                s.graph.relations + (RelationEdge(i, p, j),))
            assert relation_score(bigger, boxes) * len(bigger.relations) == base + 1
            return


def golden_case():
    gt = [BoundingBox(0, 0, 0.2, 0.25), BoundingBox(0.1, 0, 0.3, 0.2)]
    pred = [BoundingBox(0, 0, 0.2, 0.25), BoundingBox(0.2, 0, 0.4, 0.2)]
    objs = tuple(ObjectNode(i, c, Kind.THING, b) for i, (c, b) in enumerate(zip("ab", gt)))
    rels = (RelationEdge(0, P.LEFT_OF, 1), RelationEdge(0, P.ABOVE, 1),
            RelationEdge(0, P.IN_FRONT_OF, 1), RelationEdge(1, P.BEHIND, 0))
    return SceneGraph((10, 10), objs, rels), pred, gt


def test_eval_report_matches_golden_file():
    g, pred, gt = golden_case()
    got = evaluate([g], [pred], [gt]).to_dict()
    want = json.loads(GOLDEN.read_text())
    assert list(got) == list(want)
    assert list(got["per_predicate"]) == list(want["per_predicate"])
    assert got["per_predicate"] == want["per_predicate"]
    for key in ("n_graphs", "n_relations", "n_objects"):
        assert got[key] == want[key]
    assert got["relation_score"] == want["relation_score"]
    assert got["avg_iou"] == pytest.approx(want["avg_iou"], abs=1e-12)
