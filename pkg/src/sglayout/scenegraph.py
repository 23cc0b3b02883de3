"""Scene graphs: data model, geometric relation labels, construction and augmentation."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateGeometry, IncompleteNode, ParseError, SceneRejected
from .geometry import BoundingBox


class Kind(enum.Enum):
    THING = "thing"
    STUFF = "stuff"


class Predicate(enum.Enum):
    LEFT_OF = "left of"
    RIGHT_OF = "right of"
    ABOVE = "above"
    BELOW = "below"
    INSIDE = "inside"
    SURROUNDING = "surrounding"
    IN_FRONT_OF = "in front of"
    BEHIND = "behind"
    ON = "on"
    UNDER = "under"

    @property
    def order(self) -> int:
        return _PREDICATE_ORDER[self]

    @property
    def is_geometric(self) -> bool:
        return self in GEOMETRIC


PREDICATES: tuple[Predicate, ...] = tuple(Predicate)
_PREDICATE_ORDER = {p: i for i, p in enumerate(PREDICATES)}
GEOMETRIC = frozenset(PREDICATES[:6])
AUGMENTED = frozenset(PREDICATES[6:])


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    kind: Kind


class Vocabulary:
    """Ordered category list; a category's position is its embedding row."""

    def __init__(self, categories: Iterable[Category]):
        self.categories = tuple(categories)
        self._by_name = {}
        ids = set()
        for c in self.categories:
            if c.id in ids or c.name in self._by_name:
                raise ValueError(f"duplicate category {c}")
            ids.add(c.id)
            self._by_name[c.name] = c
        self._row = {c.name: i for i, c in enumerate(self.categories)}

    def __len__(self):
        return len(self.categories)

    def __contains__(self, name):
        return name in self._by_name

    def __getitem__(self, name) -> Category:
        return self._by_name[name]

    def row(self, name: str) -> int:
        return self._row[name]

    def to_json(self) -> list:
        return [{"id": c.id, "name": c.name, "kind": c.kind.value} for c in self.categories]

    @classmethod
    def from_json(cls, items) -> "Vocabulary":
        return cls(Category(int(d["id"]), str(d["name"]), Kind(d["kind"])) for d in items)


@dataclass(frozen=True)
class ObjectNode:
    index: int
    category: str
    kind: Kind | None = None
    bbox: BoundingBox | None = None
    mask_ref: str | None = None


@dataclass(frozen=True)
class RelationEdge:
    subject: int
    predicate: Predicate
    object: int
    augmented: bool = False

    @property
    def triple(self) -> tuple[int, Predicate, int]:
        return (self.subject, self.predicate, self.object)

    def sort_key(self):
        return (self.subject, self.predicate.order, self.object)


@dataclass(frozen=True)
class SceneGraph:
    """Immutable scene graph. Relations are kept sorted by (subject, predicate, object)."""

    image_size: tuple[int, int]
    objects: tuple[ObjectNode, ...]
    relations: tuple[RelationEdge, ...] = field(default=())

    def __post_init__(self):
        objs = tuple(self.objects)
        if not objs:
            raise ValueError("scene graph needs at least one object")
        for i, o in enumerate(objs):
            if o.index != i:
                raise ValueError(f"object at position {i} has index {o.index}")
        rels = tuple(sorted(self.relations, key=RelationEdge.sort_key))
        seen = set()
        for e in rels:
            if e.subject == e.object:
                raise ValueError(f"self-loop on object {e.subject}")
            for idx in (e.subject, e.object):
                if not 0 <= idx < len(objs):
                    raise ValueError(f"relation references missing object {idx}")
            if e.triple in seen:
                raise ValueError(f"duplicate relation {e.triple}")
            seen.add(e.triple)
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "objects", objs)
        object.__setattr__(self, "relations", rels)

    def __len__(self):
        return len(self.objects)

    def boxes(self) -> list[BoundingBox]:
        return [o.bbox for o in self.objects]


def classify_relation(subject_box: BoundingBox, object_box: BoundingBox) -> Predicate:
    """Label the geometric relation of ``subject_box`` with respect to ``object_box``.

    Containment is checked first. Otherwise the direction of the vector from
    the subject center to the object center picks one of four 90-degree
    sectors, half-open so that boundary angles have exactly one owner:
    left of [-45, 45), above [45, 135), right of [135, 180] U [-180, -135),
    below [-135, -45), with y pointing down.
    """
    s_in_o = object_box.contains(subject_box)
    o_in_s = subject_box.contains(object_box)
    if s_in_o and o_in_s:
        raise DegenerateGeometry("identical boxes have no geometric relation")
    if s_in_o:
        return Predicate.INSIDE
    if o_in_s:
        return Predicate.SURROUNDING
    sx, sy = subject_box.center
    ox, oy = object_box.center
    dx, dy = ox - sx, oy - sy
    # exact sector tests on (dx, dy) instead of atan2, so a->b and b->a always mirror
    if dx > 0 and -dx <= dy < dx:
        return Predicate.LEFT_OF
    if dy > 0 and -dy < dx <= dy:
        return Predicate.ABOVE
    if dx < 0 and dx < dy <= -dx:
        return Predicate.RIGHT_OF
    if dy < 0 and dy <= dx < -dy:
        return Predicate.BELOW
    raise DegenerateGeometry("boxes share a center and neither contains the other")


@dataclass(frozen=True)
class AnnotatedObject:
    """An annotated instance used to build a scene graph.

    ``mask`` is an image-sized binary array when available.
    """

    category: str
    bbox: BoundingBox
    kind: Kind | None = None
    mask: np.ndarray | None = field(default=None, compare=False)
    mask_ref: str | None = None

    def area_fraction(self, image_size: tuple[int, int]) -> float:
        w, h = image_size
        if self.mask is not None:
            return float(np.count_nonzero(self.mask)) / (w * h)
        return self.bbox.area / (w * h)


@dataclass(frozen=True)
class BuildConfig:
    min_area_frac: float = 0.02
    min_objects: int = 3
    max_objects: int = 8
    edges_per_object: int = 1
    rng_seed: int = 0


def filter_objects(objects: Sequence[AnnotatedObject], image_size, cfg: BuildConfig):
    return [o for o in objects if o.area_fraction(image_size) >= cfg.min_area_frac]


def build_scene_graph(objects: Sequence[AnnotatedObject], image_size: tuple[int, int],
                      config: BuildConfig | None = None) -> SceneGraph:
    """Build a scene graph from annotated objects.

    Small objects are dropped, the scene is rejected unless the survivor count
    is within range, and each survivor gets ``edges_per_object`` outgoing
    edges to distinct random peers labeled with ``classify_relation``. Peers
    whose relation is degenerate are skipped in favor of the next candidate.
    """
    cfg = config or BuildConfig()
    kept = filter_objects(objects, image_size, cfg)
    if not cfg.min_objects <= len(kept) <= cfg.max_objects:
        raise SceneRejected(f"{len(kept)} objects survive filtering, "
                            f"need {cfg.min_objects}..{cfg.max_objects}")
    nodes = tuple(ObjectNode(i, o.category, o.kind, o.bbox, o.mask_ref) for i, o in enumerate(kept))
    rng = np.random.default_rng(cfg.rng_seed)
    edges = []
    n = len(nodes)
    for i in range(n):
        peers = [j for j in range(n) if j != i]
        added = 0
        for j in rng.permutation(peers):
            if added >= cfg.edges_per_object:
                break
            try:
                p = classify_relation(nodes[i].bbox, nodes[int(j)].bbox)
            except DegenerateGeometry:
                continue
            edges.append(RelationEdge(i, p, int(j)))
            added += 1
    return SceneGraph(tuple(image_size), nodes, tuple(edges))


def _depth_edges(a: int, b: int, box_a: BoundingBox, box_b: BoundingBox):
    # the box whose bottom edge is lower in the image is in front; equal bottoms give no order
    if box_a.bottom > box_b.bottom:
        front, back = a, b
    elif box_b.bottom > box_a.bottom:
        front, back = b, a
    else:
        return []
    return [RelationEdge(front, Predicate.IN_FRONT_OF, back, True),
            RelationEdge(back, Predicate.BEHIND, front, True)]


def augment_relations(graph: SceneGraph) -> SceneGraph:
    """Add depth and support relations between overlapping objects.

    thing/thing and stuff/stuff: in front of + behind, by bottom edge.
    thing/stuff: thing on stuff + stuff under thing.
    """
    for o in graph.objects:
        if o.kind is None or o.bbox is None:
            raise IncompleteNode(f"object {o.index} ({o.category}) lacks kind or bbox")
    existing = {e.triple for e in graph.relations}
    new = []
    objs = graph.objects
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            a, b = objs[i], objs[j]
            if a.bbox.intersection_area(b.bbox) <= 0:
                continue
            if a.kind == b.kind:
                cand = _depth_edges(i, j, a.bbox, b.bbox)
            else:
                thing, stuff = (i, j) if a.kind == Kind.THING else (j, i)
                cand = [RelationEdge(thing, Predicate.ON, stuff, True),
                        RelationEdge(stuff, Predicate.UNDER, thing, True)]
            for e in cand:
                if e.triple not in existing:
                    existing.add(e.triple)
                    new.append(e)
    if not new:
        return graph
    return SceneGraph(graph.image_size, graph.objects, graph.relations + tuple(new))


# ---- file format -------------------------------------------------------------

_PRED_BY_NAME = {p.value: p for p in Predicate}


def graph_to_dict(graph: SceneGraph) -> dict:
    objects = []
    for o in graph.objects:
        d = {"index": o.index, "category": o.category}
        if o.kind is not None:
            d["kind"] = o.kind.value
        if o.bbox is not None:
            d["bbox"] = [float(v) for v in o.bbox.as_tuple()]
        if o.mask_ref is not None:
            d["mask_ref"] = o.mask_ref
        objects.append(d)
    relations = [{"s": e.subject, "p": e.predicate.value, "o": e.object, "aug": e.augmented}
                 for e in graph.relations]
    return {"image_size": list(graph.image_size), "objects": objects, "relations": relations}


def serialize_scene_graph(graph: SceneGraph, compact: bool = False) -> str:
    """Canonical JSON text. ``compact`` puts the whole graph on one line."""
    d = graph_to_dict(graph)
    if compact:
        return json.dumps(d, separators=(",", ":"))
    lines = ['{', f'  "image_size": {json.dumps(d["image_size"])},', '  "objects": [']
    lines += [f"    {json.dumps(o)}," for o in d["objects"]]
    lines[-1] = lines[-1].rstrip(",")
    lines.append("  ],")
    if d["relations"]:
        lines.append('  "relations": [')
        lines += [f"    {json.dumps(r)}," for r in d["relations"]]
        lines[-1] = lines[-1].rstrip(",")
        lines.append("  ]")
    else:
        lines.append('  "relations": []')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _field(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise ParseError(f"{where}: missing field '{key}'")
    return d[key]


def graph_from_dict(doc, frame="pixel") -> SceneGraph:
    size = _field(doc, "image_size", "graph")
    if not (isinstance(size, list) and len(size) == 2 and all(isinstance(v, int) for v in size)):
        raise ParseError(f"image_size: expected [W, H] integers, got {size!r}")
    raw_objects = _field(doc, "objects", "graph")
    if not isinstance(raw_objects, list) or not raw_objects:
        raise ParseError("objects: expected a non-empty list")
    objects = []
    for pos, od in enumerate(raw_objects):
        where = f"objects[{pos}]"
        idx = _field(od, "index", where)
        if idx != pos:
            raise ParseError(f"{where}.index: expected {pos}, got {idx!r}")
        cat = _field(od, "category", where)
        if not isinstance(cat, str):
            raise ParseError(f"{where}.category: expected string")
        kind = None
        if "kind" in od:
            try:
                kind = Kind(od["kind"])
            except ValueError:
                raise ParseError(f"{where}.kind: unknown kind {od['kind']!r}") from None
        bbox = None
        if "bbox" in od:
            vals = od["bbox"]
            if not (isinstance(vals, list) and len(vals) == 4):
                raise ParseError(f"{where}.bbox: expected [l, t, r, b]")
            try:
                bbox = BoundingBox(*(float(v) for v in vals), frame=frame)
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{where}.bbox: {exc}") from None
        objects.append(ObjectNode(pos, cat, kind, bbox, od.get("mask_ref")))
    relations = []
    seen = set()
    for pos, rd in enumerate(_field(doc, "relations", "graph")):
        where = f"relations[{pos}]"
        s, p, o = _field(rd, "s", where), _field(rd, "p", where), _field(rd, "o", where)
        if p not in _PRED_BY_NAME:
            raise ParseError(f"{where}.p: unknown predicate {p!r}")
        for name, idx in (("s", s), ("o", o)):
            if not isinstance(idx, int) or not 0 <= idx < len(objects):
                raise ParseError(f"{where}.{name}: object index {idx!r} out of range "
                                 f"(graph has {len(objects)} objects)")
        if s == o:
            raise ParseError(f"{where}: subject and object are both {s}")
        edge = RelationEdge(s, _PRED_BY_NAME[p], o, bool(rd.get("aug", False)))
        if edge.triple in seen:
            raise ParseError(f"{where}: duplicate relation ({s}, {p!r}, {o})")
        seen.add(edge.triple)
        relations.append(edge)
    return SceneGraph(tuple(size), tuple(objects), tuple(relations))


def parse_scene_graph(text: str) -> SceneGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return graph_from_dict(doc)
