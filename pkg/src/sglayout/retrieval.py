"""Shape-aware patch retrieval over normalized extreme-point descriptors."""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DegenerateGeometry, EmptyDataset, ParseError, UnknownVocab
from .geometry import (BoundingBox, ExtremePoints, bbox_from_extreme_points, canonical_mask, mask_iou,
                       normalize_descriptor, trivial_extreme_points)

INDEX_FORMAT = "sgl-index-v1"
CANONICAL_SIZE = 64

# Patch counts per category in the COCO-stuff training split.
REFERENCE_COUNTS = OrderedDict([
    ("bear", 1152), ("bed", 4048), ("bench", 4382), ("bicycle", 3012), ("bird", 2966),
    ("boat", 3614), ("bottle", 3831), ("bus", 4278), ("car", 8600), ("cat", 4366),
    ("chair", 15292), ("cow", 3540), ("dining table", 12201), ("dog", 4230),
    ("elephant", 3947), ("fire hydrant", 1180), ("giraffe", 4454), ("horse", 4197),
    ("motorcycle", 5057), ("stop sign", 1051), ("surfboard", 2676), ("train", 4126),
    ("zebra", 3909),
])
RETRIEVAL_CATEGORIES = tuple(REFERENCE_COUNTS)


@dataclass(frozen=True)
class PatchRecord:
    patch_id: int
    category: str
    image_id: int
    bbox: BoundingBox
    descriptor: np.ndarray = field(compare=False)
    image_size: tuple[int, int] = (0, 0)
    mask_ref: str | None = None

    @property
    def bbox_dims(self) -> tuple[float, float]:
        """Box width and height relative to the image."""
        w, h = self.image_size
        return (self.bbox.width / w, self.bbox.height / h)


@dataclass
class _Group:
    ids: np.ndarray
    descriptors: np.ndarray
    dims: np.ndarray


class RetrievalIndex:
    """Immutable per-category arrays of descriptors, ordered by patch id."""

    def __init__(self, records: Sequence[PatchRecord], vocab: Sequence[str] | None = None):
        if not records:
            raise EmptyDataset("no patch records to index")
        self.vocab = tuple(vocab) if vocab is not None else tuple(sorted({r.category for r in records}))
        known = set(self.vocab)
        by_cat: dict[str, list[PatchRecord]] = {c: [] for c in self.vocab}
        for r in records:
            if r.category not in known:
                raise UnknownVocab(f"patch {r.patch_id}: category {r.category!r} not in vocabulary")
            d = np.asarray(r.descriptor, dtype=np.float64)
            if d.shape != (10,) or not np.all((d >= 0) & (d <= 1)):
                raise ValueError(f"patch {r.patch_id}: descriptor must be 10 values in [0, 1]")
            by_cat[r.category].append(r)
        self.records = {r.patch_id: r for r in sorted(records, key=lambda r: r.patch_id)}
        if len(self.records) != len(records):
            raise ValueError("duplicate patch ids")
        self._groups: dict[str, _Group] = {}
        for cat in self.vocab:
            recs = sorted(by_cat[cat], key=lambda r: r.patch_id)
            if not recs:
                continue
            ids = np.array([r.patch_id for r in recs], dtype=np.int64)
            desc = np.stack([np.asarray(r.descriptor, dtype=np.float64) for r in recs])
            dims = np.array([r.bbox_dims for r in recs], dtype=np.float64)
            for a in (ids, desc, dims):
                a.setflags(write=False)
            self._groups[cat] = _Group(ids, desc, dims)
        self.checksum = self._checksum()

    def _checksum(self) -> str:
        h = hashlib.sha256()
        for cat in self.vocab:
            h.update(cat.encode("utf-8") + b"\0")
            g = self._groups.get(cat)
            if g is None:
                continue
            h.update(g.ids.astype("<i8").tobytes())
            h.update(g.descriptors.astype("<f8").tobytes())
            h.update(g.dims.astype("<f8").tobytes())
        return h.hexdigest()

    @property
    def counts(self) -> "OrderedDict[str, int]":
        return OrderedDict((c, len(self._groups[c].ids)) for c in self.vocab if c in self._groups)

    def group(self, category: str) -> _Group:
        if category not in self._groups:
            raise UnknownVocab(f"category {category!r} has no patches in the index")
        return self._groups[category]


def build_index(records: Sequence[PatchRecord], vocab: Sequence[str] | None = None) -> RetrievalIndex:
    return RetrievalIndex(records, vocab)


def query_descriptor(ep: ExtremePoints) -> np.ndarray:
    """Descriptor of predicted points; a collapsed prediction falls back to its padded box."""
    try:
        return normalize_descriptor(ep)
    except DegenerateGeometry:
        box, _ = bbox_from_extreme_points(ep)
        return normalize_descriptor(trivial_extreme_points(box))


def _ranked(ids: np.ndarray, dist: np.ndarray, k: int) -> list[tuple[int, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.lexsort((ids, dist))[:k]
    return [(int(ids[i]), float(dist[i])) for i in order]


def query_topk(index: RetrievalIndex, category: str, query, k: int) -> list[tuple[int, float]]:
    """The k nearest patches by L2 distance between descriptors; ties by patch id."""
    g = index.group(category)
    q = np.asarray(query, dtype=np.float64).reshape(10)
    dist = np.sqrt(((g.descriptors - q) ** 2).sum(axis=1))
    return _ranked(g.ids, dist, k)


def baseline_bbox_query(index: RetrievalIndex, category: str, dims, k: int) -> list[tuple[int, float]]:
    """Nearest patches by L2 distance between image-relative box (width, height)."""
    g = index.group(category)
    q = np.asarray(dims, dtype=np.float64).reshape(2)
    dist = np.sqrt(((g.dims - q) ** 2).sum(axis=1))
    return _ranked(g.ids, dist, k)


def baseline_random_query(index: RetrievalIndex, category: str, k: int, seed: int) -> list[tuple[int, float]]:
    """Uniform sample without replacement; distances are NaN."""
    g = index.group(category)
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(g.ids), size=min(k, len(g.ids)), replace=False)
    return [(int(g.ids[i]), float("nan")) for i in pick]


# ---- evaluation -----------------------------------------------------------------

@dataclass
class RetrievalQuery:
    category: str
    descriptor: np.ndarray
    dims: tuple[float, float]
    mask: np.ndarray


@dataclass
class RetrievalReport:
    method: str
    per_category: "OrderedDict[str, dict]"
    top1: float
    top5: float

    def to_dict(self) -> dict:
        return {"method": self.method, "top1_iou": self.top1, "top5_iou": self.top5,
                "per_category": self.per_category}


def evaluate_retrieval(index: RetrievalIndex, queries: Sequence[RetrievalQuery], method: str,
                       db_masks: Mapping[int, np.ndarray] | Callable[[int], np.ndarray],
                       k: int = 5, seed: int = 0) -> RetrievalReport:
    """Top-1 and best-of-top-k shape IoU, averaged per category then across categories.

    Masks are compared in their own canonical frame (tight crop resized to
    64 x 64), so the score measures shape and pose rather than position.
    """
    get_mask = db_masks if callable(db_masks) else db_masks.__getitem__
    canon_cache: dict[int, np.ndarray] = {}

    def canon(pid):
        if pid not in canon_cache:
            canon_cache[pid] = canonical_mask(get_mask(pid), CANONICAL_SIZE)
        return canon_cache[pid]

    scores: "OrderedDict[str, list[tuple[float, float]]]" = OrderedDict()
    for qi, q in enumerate(queries):
        if method == "ep":
            ranked = query_topk(index, q.category, q.descriptor, k)
        elif method == "bb":
            ranked = baseline_bbox_query(index, q.category, q.dims, k)
        elif method == "random":
            ranked = baseline_random_query(index, q.category, k, seed + qi)
        else:
            raise ValueError(f"unknown retrieval method {method!r}")
        qmask = canonical_mask(q.mask, CANONICAL_SIZE)
        ious = [mask_iou(qmask, canon(pid)) for pid, _ in ranked]
        scores.setdefault(q.category, []).append((ious[0], max(ious[:5])))
    per_cat = OrderedDict()
    for cat in sorted(scores):
        arr = np.array(scores[cat])
        per_cat[cat] = {"top1_iou": float(arr[:, 0].mean()), "top5_iou": float(arr[:, 1].mean()),
                        "n": len(arr)}
    top1 = float(np.mean([v["top1_iou"] for v in per_cat.values()])) if per_cat else 0.0
    top5 = float(np.mean([v["top5_iou"] for v in per_cat.values()])) if per_cat else 0.0
    return RetrievalReport(method, per_cat, top1, top5)


# ---- index file -----------------------------------------------------------------

def write_index(path, index: RetrievalIndex):
    """JSON-lines: a header line, then one line per patch in id order."""
    with open(path, "w", encoding="utf-8") as f:
        header = {"format": INDEX_FORMAT, "vocab": list(index.vocab), "counts": dict(index.counts),
                  "checksum": index.checksum}
        f.write(json.dumps(header) + "\n")
        for r in index.records.values():
            line = {"id": r.patch_id, "cat": r.category, "bbox": list(r.bbox.as_tuple()),
                    "desc": [float(v) for v in r.descriptor], "mask": r.mask_ref,
                    "image": r.image_id, "image_size": list(r.image_size)}
            f.write(json.dumps(line) + "\n")


def read_index(path) -> RetrievalIndex:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty index file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:1: {exc.msg}") from None
    if header.get("format") != INDEX_FORMAT:
        raise ParseError(f"{path}:1: expected format {INDEX_FORMAT!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            records.append(PatchRecord(
                patch_id=int(d["id"]), category=d["cat"], image_id=int(d.get("image", 0)),
                bbox=BoundingBox(*map(float, d["bbox"])),
                descriptor=np.array(d["desc"], dtype=np.float64),
                image_size=tuple(d.get("image_size", (0, 0))), mask_ref=d.get("mask")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    index = RetrievalIndex(records, header.get("vocab"))
    if "checksum" in header and header["checksum"] != index.checksum:
        raise ParseError(f"{path}: checksum mismatch")
    return index
