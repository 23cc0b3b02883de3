"""COCO-style annotation ingestion: scenes for training and patches for retrieval."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import sample_targets
from .errors import DegenerateGeometry, ParseError, UnknownVocab
from .geometry import BoundingBox, extract_extreme_points, normalize_descriptor, rasterize_polygon
from .retrieval import RETRIEVAL_CATEGORIES, PatchRecord
from .scenegraph import (AnnotatedObject, BuildConfig, Category, Kind, Vocabulary,
                         augment_relations, build_scene_graph, filter_objects)
from .train import TrainSample

log = logging.getLogger(__name__)

# COCO-stuff numbers its 91 stuff classes from 92 upward.
FIRST_STUFF_ID = 92


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: BoundingBox
    polygons: tuple[np.ndarray, ...] = field(compare=False)


@dataclass
class AnnotationSet:
    images: dict[int, ImageInfo]
    annotations: list[Annotation]
    categories: dict[int, Category]
    skipped_crowd: int = 0
    skipped_degenerate: int = 0

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.images), len(self.annotations)

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.categories[k] for k in sorted(self.categories))

    def by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {i: [] for i in sorted(self.images)}
        for a in self.annotations:
            out[a.image_id].append(a)
        return out


def _get(d, key, where, kind=None):
    if not isinstance(d, dict) or key not in d:
        raise ParseError(f"{where}: missing field {key!r}")
    v = d[key]
    if kind is not None and not isinstance(v, kind):
        raise ParseError(f"{where}.{key}: expected {kind.__name__ if isinstance(kind, type) else 'number'}")
    return v


def _polygons(seg, where) -> tuple[np.ndarray, ...]:
    polys = []
    for j, flat in enumerate(seg):
        if not isinstance(flat, list) or len(flat) % 2 or len(flat) < 6:
            raise ParseError(f"{where}.segmentation[{j}]: need an even list of >= 6 coordinates")
        try:
            polys.append(np.asarray(flat, dtype=np.float64).reshape(-1, 2))
        except (TypeError, ValueError):
            raise ParseError(f"{where}.segmentation[{j}]: non-numeric coordinate") from None
    return tuple(polys)


def parse_annotations(doc, stuff_ids: Iterable[int] | None = None) -> AnnotationSet:
    """Parse a decoded COCO document.

    Crowd and RLE annotations are skipped and counted, as are boxes with
    zero width or height. ``stuff_ids`` defaults to every id from 92 up.
    """
    if not isinstance(doc, dict):
        raise ParseError("annotation file: top level must be an object")
    stuff = set(stuff_ids) if stuff_ids is not None else None
    number = (int, float)

    categories = {}
    for i, c in enumerate(_get(doc, "categories", "root", list)):
        where = f"categories[{i}]"
        cid = _get(c, "id", where, int)
        is_stuff = cid >= FIRST_STUFF_ID if stuff is None else cid in stuff
        categories[cid] = Category(cid, _get(c, "name", where, str),
                                   Kind.STUFF if is_stuff else Kind.THING)

    images = {}
    for i, im in enumerate(_get(doc, "images", "root", list)):
        where = f"images[{i}]"
        info = ImageInfo(_get(im, "id", where, int), _get(im, "width", where, int),
                         _get(im, "height", where, int))
        if info.width < 1 or info.height < 1:
            raise ParseError(f"{where}: image size must be positive")
        images[info.id] = info

    aset = AnnotationSet(images, [], categories)
    for i, a in enumerate(_get(doc, "annotations", "root", list)):
        where = f"annotations[{i}]"
        cid = _get(a, "category_id", where, int)
        if cid not in categories:
            raise UnknownVocab(f"{where}: unknown category id {cid}")
        image_id = _get(a, "image_id", where, int)
        if image_id not in images:
            raise ParseError(f"{where}: unknown image id {image_id}")
        seg = a.get("segmentation")
        if a.get("iscrowd", 0) or isinstance(seg, dict):
            aset.skipped_crowd += 1
            continue
        bbox = _get(a, "bbox", where, list)
        if len(bbox) != 4 or not all(isinstance(v, number) for v in bbox):
            raise ParseError(f"{where}.bbox: expected [x, y, w, h]")
        try:
            box = BoundingBox.from_xywh(*map(float, bbox))
        except DegenerateGeometry:
            aset.skipped_degenerate += 1
            continue
        polys = _polygons(seg, where) if isinstance(seg, list) else ()
        aset.annotations.append(Annotation(_get(a, "id", where, int), image_id, cid, box, polys))
    if aset.skipped_crowd:
        log.warning("skipped %d crowd/RLE annotations", aset.skipped_crowd)
    if aset.skipped_degenerate:
        log.warning("skipped %d annotations with an empty box", aset.skipped_degenerate)
    return aset


def ingest_annotations(path, stuff_ids: Iterable[int] | None = None) -> AnnotationSet:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return parse_annotations(doc, stuff_ids)


def annotation_mask(ann: Annotation, width: int, height: int) -> np.ndarray:
    """Union of the annotation's polygons, sampled at pixel centers."""
    mask = np.zeros((height, width), dtype=bool)
    for poly in ann.polygons:
        mask |= rasterize_polygon(poly, width, height)
    return mask


def scenes_from_annotations(aset: AnnotationSet, build: BuildConfig | None = None,
                            augment: bool = False) -> list[TrainSample]:
    """One training sample per image that keeps enough large objects."""
    build = build or BuildConfig()
    samples = []
    for image_id, anns in aset.by_image().items():
        info = aset.images[image_id]
        size = (info.width, info.height)
        objects = []
        for a in anns:
            cat = aset.categories[a.category_id]
            mask = annotation_mask(a, info.width, info.height) if a.polygons else None
            objects.append(AnnotatedObject(cat.name, a.bbox, cat.kind, mask, f"ann:{a.id}"))
        kept = filter_objects(objects, size, build)
        if not build.min_objects <= len(kept) <= build.max_objects:
            continue
        cfg = BuildConfig(build.min_area_frac, build.min_objects, build.max_objects,
                          build.edges_per_object, build.rng_seed + image_id)
        graph = build_scene_graph(objects, size, cfg)
        if augment:
            graph = augment_relations(graph)
        samples.append(sample_targets(graph, kept))
    return samples


def patches_from_annotations(aset: AnnotationSet,
                             categories: Sequence[str] = RETRIEVAL_CATEGORIES
                             ) -> list[tuple[PatchRecord, np.ndarray]]:
    """Patch records with tight-cropped masks for annotations of the retrieval categories."""
    wanted = set(categories)
    out = []
    for a in sorted(aset.annotations, key=lambda a: a.id):
        cat = aset.categories[a.category_id]
        if cat.name not in wanted or not a.polygons:
            continue
        info = aset.images[a.image_id]
        mask = annotation_mask(a, info.width, info.height)
        if not mask.any():
            continue
        ep = extract_extreme_points(mask)
        try:
            desc = normalize_descriptor(ep)
        except DegenerateGeometry:
            continue
        ys, xs = np.nonzero(mask)
        crop = mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
        out.append((PatchRecord(a.id, cat.name, a.image_id, a.bbox, desc,
                                (info.width, info.height)), crop))
    return out
