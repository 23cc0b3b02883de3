"""Seeded synthetic scenes and patch corpora for desk-scale runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import (extract_extreme_points, mask_edge_box, normalize_descriptor,
                       rasterize_polygon, tight_bbox)
from .retrieval import PatchRecord
from .scenegraph import (AnnotatedObject, BuildConfig, Category, Kind, SceneGraph, Vocabulary,
                         augment_relations, build_scene_graph, filter_objects)
from .dataset import sample_targets
from .train import TrainSample


@dataclass(frozen=True)
class SynthCategory:
    id: int
    name: str
    kind: Kind
    y_range: tuple[float, float]   # allowed center height, as a fraction of the image
    shape: str                     # patch-corpus shape family


SYNTH_CATEGORIES = (
    SynthCategory(16, "bird", Kind.THING, (0.10, 0.45), "ellipse"),
    SynthCategory(3, "car", Kind.THING, (0.55, 0.85), "trapezoid"),
    SynthCategory(18, "dog", Kind.THING, (0.50, 0.85), "lshape"),
    SynthCategory(38, "kite", Kind.THING, (0.05, 0.35), "triangle"),
    SynthCategory(15, "bench", Kind.THING, (0.55, 0.85), "tee"),
    SynthCategory(1, "person", Kind.THING, (0.30, 0.75), "star"),
    SynthCategory(157, "sky", Kind.STUFF, (0.05, 0.20), "ellipse"),
    SynthCategory(124, "grass", Kind.STUFF, (0.80, 0.95), "ellipse"),
    SynthCategory(169, "tree", Kind.STUFF, (0.25, 0.50), "ellipse"),
)


def synth_vocabulary(categories: Sequence[SynthCategory] = SYNTH_CATEGORIES) -> Vocabulary:
    return Vocabulary(Category(c.id, c.name, c.kind) for c in categories)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    num_scenes: int = 200
    image_size: tuple[int, int] = (128, 128)
    min_objects: int = 3
    max_objects: int = 8
    thing_axes: tuple[float, float] = (9.0, 30.0)   # ellipse semi-axis range, pixels
    stuff_axes: tuple[float, float] = (24.0, 64.0)
    augment: bool = True
    categories: tuple[SynthCategory, ...] = field(default=SYNTH_CATEGORIES)

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        for lo, hi in (self.thing_axes, self.stuff_axes):
            if not 0 < lo <= hi:
                raise ValueError("axis ranges must satisfy 0 < low <= high")


@dataclass
class SynthScene:
    graph: SceneGraph
    objects: list[AnnotatedObject]
    sample: TrainSample


def ellipse_mask(cx, cy, rx, ry, width, height) -> np.ndarray:
    xs = (np.arange(width) + 0.5 - cx) / rx
    ys = (np.arange(height) + 0.5 - cy) / ry
    return (xs[None, :] ** 2 + ys[:, None] ** 2) <= 1.0


def _random_object(rng: np.random.Generator, cfg: SynthConfig, build: BuildConfig) -> AnnotatedObject:
    w, h = cfg.image_size
    while True:
        cat = cfg.categories[rng.integers(len(cfg.categories))]
        lo, hi = cfg.thing_axes if cat.kind is Kind.THING else cfg.stuff_axes
        rx, ry = rng.uniform(lo, hi, size=2)
        cx = rng.uniform(0.1, 0.9) * w
        cy = rng.uniform(*cat.y_range) * h
        mask = ellipse_mask(cx, cy, rx, ry, w, h)
        if np.count_nonzero(mask) >= build.min_area_frac * w * h:
            return AnnotatedObject(cat.name, mask_edge_box(mask), cat.kind, mask)


def synth_generate(cfg: SynthConfig) -> list[SynthScene]:
    """Seeded scenes of 3-8 axis-aligned elliptical blobs with graphs and targets."""
    rng = np.random.default_rng(cfg.seed)
    build = BuildConfig(min_objects=cfg.min_objects, max_objects=cfg.max_objects)
    scenes = []
    while len(scenes) < cfg.num_scenes:
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        objects = [_random_object(rng, cfg, build) for _ in range(n)]
        bcfg = BuildConfig(min_objects=cfg.min_objects, max_objects=cfg.max_objects,
                           rng_seed=int(rng.integers(2 ** 31)))
        graph = build_scene_graph(objects, cfg.image_size, bcfg)
        if cfg.augment:
            graph = augment_relations(graph)
        kept = filter_objects(objects, cfg.image_size, bcfg)
        scenes.append(SynthScene(graph, kept, sample_targets(graph, kept)))
    return scenes


# ---- patch corpus ---------------------------------------------------------------

def _base_polygon(shape: str, rng: np.random.Generator) -> np.ndarray:
    """Unit-scale outline centered near the origin."""
    if shape == "ellipse":
        t = np.linspace(0, 2 * np.pi, 40, endpoint=False)
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    if shape == "triangle":
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=3))
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if shape == "trapezoid":
        top = rng.uniform(0.2, 0.7)
        return np.array([[-top, -0.6], [top, -0.6], [1.0, 0.6], [-1.0, 0.6]])
    if shape == "lshape":
        a, b = rng.uniform(0.2, 0.6, size=2)
        return np.array([[-1, -1], [-1 + a, -1], [-1 + a, 1 - b], [1, 1 - b], [1, 1], [-1, 1]], float)
    if shape == "tee":
        a, b = rng.uniform(0.15, 0.4, size=2)
        return np.array([[-1, -1], [1, -1], [1, -1 + b * 2], [a, -1 + b * 2], [a, 1], [-a, 1],
                         [-a, -1 + b * 2], [-1, -1 + b * 2]], float)
    if shape == "star":
        k = 5
        t = np.arange(2 * k) * np.pi / k
        r = np.where(np.arange(2 * k) % 2 == 0, 1.0, rng.uniform(0.35, 0.6))
        return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    raise ValueError(f"unknown shape family {shape!r}")


def random_shape_mask(shape: str, rng: np.random.Generator, canvas: int = 64) -> np.ndarray:
    """A randomly stretched and rotated instance of a shape family on a square canvas."""
    while True:
        poly = _base_polygon(shape, rng) * np.array([1.0, rng.uniform(0.3, 1.0)])
        theta = rng.uniform(0, np.pi)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        poly = poly @ rot.T
        span = (poly.max(axis=0) - poly.min(axis=0)).max()
        scale = rng.uniform(0.5, 0.95) * canvas / span
        poly = (poly - (poly.max(axis=0) + poly.min(axis=0)) / 2) * scale + canvas / 2
        mask = rasterize_polygon(poly, canvas, canvas)
        if np.count_nonzero(mask) < 30:
            continue
        x0, y0, x1, y1 = tight_bbox(mask)
        if x1 > x0 and y1 > y0:
            return mask


def patch_record_from_mask(patch_id: int, category: str, image_id: int, mask: np.ndarray,
                           mask_ref: str | None = None) -> PatchRecord:
    h, w = mask.shape
    ep = extract_extreme_points(mask)
    return PatchRecord(patch_id, category, image_id, mask_edge_box(mask), normalize_descriptor(ep),
                       (w, h), mask_ref)


def synth_patch_corpus(seed: int, per_category: int, categories: Sequence[SynthCategory] | None = None,
                       canvas: int = 64, first_id: int = 0) -> list[tuple[PatchRecord, np.ndarray]]:
    """Patches of every thing category, each drawn from its category's shape family."""
    cats = [c for c in (categories or SYNTH_CATEGORIES) if c.kind is Kind.THING]
    rng = np.random.default_rng(seed)
    out = []
    pid = first_id
    for _ in range(per_category):
        for cat in cats:
            mask = random_shape_mask(cat.shape, rng, canvas)
            crop = canonical_crop(mask)
            out.append((patch_record_from_mask(pid, cat.name, pid, mask), crop))
            pid += 1
    return out


def canonical_crop(mask: np.ndarray) -> np.ndarray:
    """The mask cropped to its tight box."""
    x0, y0, x1, y1 = tight_bbox(mask)
    return np.asarray(mask, dtype=bool)[y0:y1 + 1, x0:x1 + 1]

