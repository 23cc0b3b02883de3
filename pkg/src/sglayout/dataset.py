"""Training targets and the on-disk dataset directory.

Layout of a dataset directory::

    manifest.json    format tag, vocabulary, counts
    graphs.jsonl     one compact scene graph per line
    gt_eps.npy       (total objects, 10) float64, image-normalized extreme points
    gt_masks.npy     (total objects, 16, 16) uint8
    patches.jsonl    patch records (same fields as index lines)
    masks/*.ppm      tight-cropped patch masks
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .composition import mask_from_ppm, mask_to_ppm
from .errors import ParseError
from .geometry import BoundingBox, extract_extreme_points, pixel_points_to_unit, trivial_extreme_points
from .retrieval import PatchRecord
from .scenegraph import (AnnotatedObject, Kind, SceneGraph, Vocabulary, graph_from_dict,
                         serialize_scene_graph)
from .train import TrainSample, prepare_gt_mask

DATASET_FORMAT = "sgl-dataset-v1"


def sample_targets(graph: SceneGraph, objects: Sequence[AnnotatedObject]) -> TrainSample:
    """Ground-truth extreme points (image-normalized) and 16x16 masks per object.

    Things use points extracted from their masks; stuff, and things without
    a usable mask, use the box's trivial points.
    """
    w, h = graph.image_size
    eps, masks = [], []
    for node, obj in zip(graph.objects, objects, strict=True):
        has_mask = obj.mask is not None and np.any(obj.mask)
        if obj.kind is Kind.THING and has_mask:
            ep = pixel_points_to_unit(extract_extreme_points(obj.mask), w, h)
        else:
            ep = trivial_extreme_points(node.bbox.normalized(w, h))
        eps.append(ep.as_array())
        masks.append(prepare_gt_mask(obj.mask) if has_mask else np.ones((16, 16)))
    return TrainSample(graph, np.array(eps), np.array(masks))


@dataclass
class Dataset:
    vocab: Vocabulary
    samples: list[TrainSample]
    patches: list[PatchRecord] = field(default_factory=list)
    root: Path | None = None

    def patch_mask(self, patch_id: int) -> np.ndarray:
        rec = next(p for p in self.patches if p.patch_id == patch_id)
        return mask_from_ppm(self.root / rec.mask_ref)


def patch_line(r: PatchRecord) -> dict:
    return {"id": r.patch_id, "cat": r.category, "image": r.image_id,
            "bbox": list(r.bbox.as_tuple()), "desc": [float(v) for v in r.descriptor],
            "image_size": list(r.image_size), "mask": r.mask_ref}


def patch_from_line(d: dict) -> PatchRecord:
    return PatchRecord(int(d["id"]), d["cat"], int(d["image"]), BoundingBox(*map(float, d["bbox"])),
                       np.array(d["desc"], dtype=np.float64), tuple(d["image_size"]), d.get("mask"))


def write_dataset(root, vocab: Vocabulary, samples: Sequence[TrainSample],
                  patches: Sequence[tuple[PatchRecord, np.ndarray]] = ()):
    """Write samples and optional (record, cropped mask) patches; output is byte-stable."""
    root = Path(root)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "graphs.jsonl", "w", encoding="utf-8") as f:
        for s in samples:
            f.write(serialize_scene_graph(s.graph, compact=True) + "\n")
    eps = np.concatenate([s.gt_eps for s in samples]) if samples else np.zeros((0, 10))
    masks = (np.concatenate([s.gt_masks for s in samples]) if samples
             else np.zeros((0, 16, 16))).astype(np.uint8)
    np.save(root / "gt_eps.npy", eps.astype("<f8"))
    np.save(root / "gt_masks.npy", masks)
    with open(root / "patches.jsonl", "w", encoding="utf-8") as f:
        for rec, crop in patches:
            ref = f"masks/{rec.patch_id:06d}.ppm"
            mask_to_ppm(root / ref, crop)
            f.write(json.dumps(patch_line(PatchRecord(rec.patch_id, rec.category, rec.image_id,
                                                      rec.bbox, rec.descriptor, rec.image_size,
                                                      ref))) + "\n")
    manifest = {"format": DATASET_FORMAT, "vocab": vocab.to_json(), "n_samples": len(samples),
                "n_objects": int(len(eps)), "n_patches": len(patches)}
    with open(root / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def read_dataset(root) -> Dataset:
    root = Path(root)
    try:
        with open(root / "manifest.json", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{root / 'manifest.json'}: line {exc.lineno}: {exc.msg}") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise ParseError(f"{root}: not a {DATASET_FORMAT} directory")
    vocab = Vocabulary.from_json(manifest["vocab"])
    graphs = []
    with open(root / "graphs.jsonl", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            try:
                graphs.append(graph_from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ParseError(f"graphs.jsonl:{lineno}: {exc.msg}") from None
            except ParseError as exc:
                raise ParseError(f"graphs.jsonl:{lineno}: {exc}") from None
    eps = np.load(root / "gt_eps.npy")
    masks = np.load(root / "gt_masks.npy").astype(np.float64)
    samples, pos = [], 0
    for g in graphs:
        n = len(g.objects)
        samples.append(TrainSample(g, eps[pos:pos + n], masks[pos:pos + n]))
        pos += n
    if pos != len(eps):
        raise ParseError(f"{root}: {len(eps)} target rows for {pos} objects")
    patches = []
    if os.path.exists(root / "patches.jsonl"):
        with open(root / "patches.jsonl", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                try:
                    patches.append(patch_from_line(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"patches.jsonl:{lineno}: {exc}") from None
    return Dataset(vocab, samples, patches, root)
